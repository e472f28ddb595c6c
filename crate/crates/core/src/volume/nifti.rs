//! Minimal importer for the single-file NIfTI-1 format (348-byte header,
//! uncompressed or gzip). Only scalar 3D images are accepted; anything else
//! is an explicit unsupported-feature error. The rest of the pipeline never
//! depends on this importer.

use super::{IntensitySpace, Volume};
use crate::error::{Error, Result};
use flate2::read::GzDecoder;
use std::path::Path;

const HEADER_SIZE: usize = 348;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Import a `.nii` / `.nii.gz` file as a volume in the given intensity space.
///
/// Voxel order maps directly: NIfTI stores x fastest, so NIfTI (nx, ny, nz)
/// becomes our (D=nz, H=ny, W=nx) grid with spacing (pixdim3, pixdim2, pixdim1).
pub fn import_nifti(path: &Path, space: IntensitySpace) -> Result<Volume> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut dec = GzDecoder::new(raw.as_slice());
        super::container::read_all(&mut dec, path)?
    } else {
        raw
    };

    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            path,
            "sizeof_hdr",
            format!("file too small for a NIfTI-1 header: {} bytes", bytes.len()),
        ));
    }
    let sizeof_hdr = i32_at(&bytes, 0);
    if sizeof_hdr != 348 {
        // 348 byte-swapped: big-endian file.
        if sizeof_hdr.swap_bytes() == 348 {
            return Err(Error::Unsupported {
                path: path.into(),
                details: "big-endian NIfTI files are not supported".into(),
            });
        }
        return Err(Error::format(
            path,
            "sizeof_hdr",
            format!("expected 348, got {sizeof_hdr}"),
        ));
    }

    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        if magic == b"ni1\0" {
            return Err(Error::Unsupported {
                path: path.into(),
                details: "two-file (.hdr/.img) NIfTI is not supported".into(),
            });
        }
        return Err(Error::format(path, "magic", format!("unrecognized magic {magic:?}")));
    }

    let ndim = i16_at(&bytes, 40);
    let dims: Vec<i16> = (1..8).map(|i| i16_at(&bytes, 40 + 2 * i)).collect();
    // Accept ndim > 3 only when the trailing dims are singleton.
    if ndim < 3 || dims[..3].iter().any(|&d| d <= 0) {
        return Err(Error::Unsupported {
            path: path.into(),
            details: format!("only 3D images are supported, got dim = {ndim} {dims:?}"),
        });
    }
    if dims[3..(ndim as usize).min(7)].iter().any(|&d| d > 1) {
        return Err(Error::Unsupported {
            path: path.into(),
            details: format!("non-singleton higher dimensions: {dims:?}"),
        });
    }
    let (nx, ny, nz) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let n = nx * ny * nz;

    let datatype = i16_at(&bytes, 70);
    let elem_size: usize = match datatype {
        2 => 1,   // uint8
        4 => 2,   // int16
        8 => 4,   // int32
        16 => 4,  // float32
        64 => 8,  // float64
        other => {
            return Err(Error::Unsupported {
                path: path.into(),
                details: format!("datatype code {other} is not supported"),
            })
        }
    };

    let pixdim: Vec<f32> = (1..4).map(|i| f32_at(&bytes, 76 + 4 * i)).collect();
    let spacing = (pixdim[2] as f64, pixdim[1] as f64, pixdim[0] as f64);

    let vox_offset = f32_at(&bytes, 108);
    if vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::format(
            path,
            "vox_offset",
            format!("invalid voxel offset {vox_offset}"),
        ));
    }
    let off = vox_offset as usize;
    if bytes.len() < off + n * elem_size {
        return Err(Error::format(
            path,
            "vox_offset",
            format!(
                "payload truncated: need {} bytes at offset {off}, file has {}",
                n * elem_size,
                bytes.len()
            ),
        ));
    }

    let scl_slope = f32_at(&bytes, 112);
    let scl_inter = f32_at(&bytes, 116);
    let (slope, inter) = if scl_slope == 0.0 { (1.0, 0.0) } else { (scl_slope, scl_inter) };

    let payload = &bytes[off..off + n * elem_size];
    let mut data = Vec::with_capacity(n);
    match datatype {
        2 => data.extend(payload.iter().map(|&v| v as f32)),
        4 => data.extend(
            payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32),
        ),
        8 => data.extend(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f32),
        ),
        16 => data.extend(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        ),
        64 => data.extend(payload.chunks_exact(8).map(|c| {
            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]) as f32
        })),
        _ => unreachable!(),
    }
    if slope != 1.0 || inter != 0.0 {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }

    // NIfTI x-fastest order equals our (z,y,x) row-major order.
    Volume::new((nz, ny, nx), spacing, space, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn build_nifti(dims: [i16; 3], datatype: i16, payload: &[u8], pixdim: [f32; 3]) -> Vec<u8> {
        let mut h = vec![0u8; 352]; // header + 4 pad bytes, vox_offset 352
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        for (i, d) in dims.iter().enumerate() {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        for i in 3..7 {
            h[42 + 2 * i..44 + 2 * i].copy_from_slice(&1i16.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        for (i, p) in pixdim.iter().enumerate() {
            h[80 + 4 * i..84 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    fn write_tmp(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = std::env::temp_dir().join(format!("sct-nifti-{}-{}", std::process::id(), name));
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn imports_float32_volume() {
        let values: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = build_nifti([4, 3, 2], 16, &payload, [1.0, 1.0, 3.0]);
        let p = write_tmp("f32.nii", &bytes);
        let v = import_nifti(&p, IntensitySpace::Hu).unwrap();
        assert_eq!(v.shape(), (2, 3, 4));
        assert_eq!(v.spacing_mm(), (3.0, 1.0, 1.0));
        assert_eq!(v.data()[5], 5.0);
    }

    #[test]
    fn imports_gzipped_int16() {
        let values: Vec<i16> = (0..8).map(|i| i * 100).collect();
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let bytes = build_nifti([2, 2, 2], 4, &payload, [2.0, 2.0, 2.0]);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        enc.write_all(&bytes).unwrap();
        let gz = enc.finish().unwrap();
        let p = write_tmp("i16.nii.gz", &gz);
        let v = import_nifti(&p, IntensitySpace::Hu).unwrap();
        assert_eq!(v.shape(), (2, 2, 2));
        assert_eq!(v.data()[7], 700.0);
    }

    #[test]
    fn rejects_unsupported_datatype() {
        let bytes = build_nifti([1, 1, 1], 128, &[0, 0, 0], [1.0, 1.0, 1.0]); // RGB24
        let p = write_tmp("rgb.nii", &bytes);
        assert!(matches!(
            import_nifti(&p, IntensitySpace::Hu),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn rejects_4d_image() {
        let values = [0f32; 8];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut bytes = build_nifti([2, 2, 2], 16, &payload, [1.0, 1.0, 1.0]);
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&2i16.to_le_bytes()); // dim[4] = 2
        let p = write_tmp("4d.nii", &bytes);
        assert!(matches!(
            import_nifti(&p, IntensitySpace::Hu),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn rejects_two_file_variant() {
        let values = [0f32; 1];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut bytes = build_nifti([1, 1, 1], 16, &payload, [1.0, 1.0, 1.0]);
        bytes[344..348].copy_from_slice(b"ni1\0");
        let p = write_tmp("pair.nii", &bytes);
        assert!(matches!(
            import_nifti(&p, IntensitySpace::Hu),
            Err(Error::Unsupported { .. })
        ));
    }

    #[test]
    fn applies_scl_slope() {
        let values: Vec<f32> = vec![1.0, 2.0];
        let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut bytes = build_nifti([2, 1, 1], 16, &payload, [1.0, 1.0, 1.0]);
        bytes[112..116].copy_from_slice(&2f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&10f32.to_le_bytes());
        let p = write_tmp("scl.nii", &bytes);
        let v = import_nifti(&p, IntensitySpace::Hu).unwrap();
        assert_eq!(v.data(), &[12.0, 14.0]);
    }
}
