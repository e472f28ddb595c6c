//! On-disk container format: one volume = `<name>.json` (UTF-8 header) +
//! `<name>.raw` (little-endian f32, (z,y,x) row-major). Masks use the same
//! pair with `"mask": true` and 0.0/1.0 payload values.

use super::{IntensitySpace, Mask, Volume};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
    intensity_space: IntensitySpace,
    mask: bool,
}

/// A loaded container entry: either a scalar volume or a mask.
#[derive(Debug, Clone)]
pub enum Entry {
    Volume(Volume),
    Mask(Mask),
}

fn json_path(base: &Path) -> PathBuf {
    base.with_extension("json")
}

fn raw_path(base: &Path) -> PathBuf {
    base.with_extension("raw")
}

fn write_pair(base: &Path, header: &Header, data: &[f32]) -> Result<()> {
    let jp = json_path(base);
    let text = serde_json::to_string_pretty(header)
        .map_err(|e| Error::format(&jp, "header", e.to_string()))?;
    std::fs::write(&jp, text).map_err(|e| Error::io(&jp, e))?;

    let rp = raw_path(base);
    let f = std::fs::File::create(&rp).map_err(|e| Error::io(&rp, e))?;
    let mut w = std::io::BufWriter::new(f);
    for &v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&rp, e))?;
    }
    w.flush().map_err(|e| Error::io(&rp, e))
}

/// Write a volume as `<base>.json` + `<base>.raw`.
pub fn save_volume(v: &Volume, base: &Path) -> Result<()> {
    let (d, h, w) = v.shape();
    let (sz, sy, sx) = v.spacing_mm();
    let header = Header {
        shape: [d, h, w],
        spacing_mm: [sz, sy, sx],
        dtype: "f32le".into(),
        intensity_space: v.intensity_space(),
        mask: false,
    };
    write_pair(base, &header, v.data())
}

/// Write a mask as `<base>.json` + `<base>.raw` (0.0/1.0 payload).
pub fn save_mask(m: &Mask, base: &Path) -> Result<()> {
    let (d, h, w) = m.shape();
    let (sz, sy, sx) = m.spacing_mm();
    let header = Header {
        shape: [d, h, w],
        spacing_mm: [sz, sy, sx],
        dtype: "f32le".into(),
        intensity_space: IntensitySpace::Hu,
        mask: true,
    };
    let data: Vec<f32> = m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_pair(base, &header, &data)
}

/// Load `<base>.json` + `<base>.raw`, dispatching on the header's mask flag.
pub fn load_entry(base: &Path) -> Result<Entry> {
    let jp = json_path(base);
    let text = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| {
        // serde reports unknown/missing fields and bad enum tags in its
        // message; surface it under the header file path.
        Error::format(&jp, "header", e.to_string())
    })?;

    if header.dtype != "f32le" {
        return Err(Error::format(
            &jp,
            "dtype",
            format!("unsupported dtype `{}` (expected f32le)", header.dtype),
        ));
    }
    let [d, h, w] = header.shape;
    let expected = d
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::format(&jp, "shape", format!("shape {:?} overflows", header.shape)))?;

    let rp = raw_path(base);
    let bytes = std::fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            &rp,
            "shape",
            format!(
                "header shape {:?} needs {} values ({} bytes), payload has {} bytes",
                header.shape,
                expected,
                expected * 4,
                bytes.len()
            ),
        ));
    }
    let mut data = Vec::with_capacity(expected);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }

    let shape = (d, h, w);
    let spacing = (header.spacing_mm[0], header.spacing_mm[1], header.spacing_mm[2]);
    if header.mask {
        let mut bools = Vec::with_capacity(data.len());
        for (i, &v) in data.iter().enumerate() {
            if v == 1.0 {
                bools.push(true);
            } else if v == 0.0 {
                bools.push(false);
            } else {
                return Err(Error::format(
                    &rp,
                    "mask",
                    format!("mask payload must be 0.0/1.0, found {v} at index {i}"),
                ));
            }
        }
        Ok(Entry::Mask(Mask::new(shape, spacing, bools)?))
    } else {
        Ok(Entry::Volume(Volume::new(
            shape,
            spacing,
            header.intensity_space,
            data,
        )?))
    }
}

/// Load a container entry that must be a volume.
pub fn load_volume(base: &Path) -> Result<Volume> {
    match load_entry(base)? {
        Entry::Volume(v) => Ok(v),
        Entry::Mask(_) => Err(Error::format(
            json_path(base),
            "mask",
            "expected a volume, file is flagged as a mask",
        )),
    }
}

/// Load a container entry that must be a mask.
pub fn load_mask(base: &Path) -> Result<Mask> {
    match load_entry(base)? {
        Entry::Mask(m) => Ok(m),
        Entry::Volume(_) => Err(Error::format(
            json_path(base),
            "mask",
            "expected a mask, file is flagged as a volume",
        )),
    }
}

/// Read an entire stream; shared by the neuroimaging importer.
pub(crate) fn read_all(r: &mut impl Read, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tmp_base(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("sct-container-{}-{}", name, std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let data: Vec<f32> = (0..4 * 5 * 6).map(|_| rng.gen_range(-1024.0..1500.0)).collect();
        let v = Volume::new((4, 5, 6), (1.0, 1.0, 3.0), IntensitySpace::Hu, data).unwrap();
        let base = tmp_base("roundtrip");
        save_volume(&v, &base).unwrap();
        let back = load_volume(&base).unwrap();
        assert_eq!(v, back);
        // Spacing must be exact through the JSON header.
        assert_eq!(back.spacing_mm(), (1.0, 1.0, 3.0));
    }

    #[test]
    fn mask_roundtrip() {
        let data = vec![true, false, true, true, false, false, true, false];
        let m = Mask::new((2, 2, 2), (3.0, 1.0, 1.0), data).unwrap();
        let base = tmp_base("mask");
        save_mask(&m, &base).unwrap();
        let back = load_mask(&base).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn payload_size_mismatch_is_shape_error() {
        let base = tmp_base("mismatch");
        let header = r#"{"shape":[2,2,2],"spacing_mm":[1.0,1.0,1.0],"dtype":"f32le","intensity_space":"HU","mask":false}"#;
        std::fs::write(base.with_extension("json"), header).unwrap();
        let payload: Vec<u8> = (0..7).flat_map(|_| 0f32.to_le_bytes()).collect();
        std::fs::write(base.with_extension("raw"), payload).unwrap();
        let err = load_volume(&base).unwrap_err();
        match err {
            Error::Format { field, .. } => assert_eq!(field, "shape"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_intensity_space_is_format_error() {
        let base = tmp_base("badspace");
        let header = r#"{"shape":[1,1,1],"spacing_mm":[1.0,1.0,1.0],"dtype":"f32le","intensity_space":"BOGUS","mask":false}"#;
        std::fs::write(base.with_extension("json"), header).unwrap();
        std::fs::write(base.with_extension("raw"), 0f32.to_le_bytes()).unwrap();
        assert!(matches!(load_volume(&base), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_header_key_is_format_error() {
        let base = tmp_base("badkey");
        let header = r#"{"shape":[1,1,1],"spacing_mm":[1.0,1.0,1.0],"dtype":"f32le","intensity_space":"HU","mask":false,"extra":1}"#;
        std::fs::write(base.with_extension("json"), header).unwrap();
        std::fs::write(base.with_extension("raw"), 0f32.to_le_bytes()).unwrap();
        assert!(matches!(load_volume(&base), Err(Error::Format { .. })));
    }
}
