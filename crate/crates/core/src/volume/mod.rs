//! 3D volume data model: HU semantics, normalization, resampling, and the
//! on-disk container format.
//!
//! Voxels are stored in (z, y, x) row-major order with spacing recorded as
//! (sz, sy, sx) millimeters, keeping the anisotropic slice axis explicit.

pub mod container;
pub mod nifti;

use crate::error::{Error, Result};
use crate::hu;
use serde::{Deserialize, Serialize};

/// What the scalar values of a volume mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntensitySpace {
    #[serde(rename = "HU")]
    Hu,
    #[serde(rename = "MRI_RAW")]
    MriRaw,
    #[serde(rename = "NORMALIZED")]
    Normalized,
}

impl std::fmt::Display for IntensitySpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            IntensitySpace::Hu => "HU",
            IntensitySpace::MriRaw => "MRI_RAW",
            IntensitySpace::Normalized => "NORMALIZED",
        };
        f.write_str(s)
    }
}

/// Dense 3D scalar grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: (usize, usize, usize),
    spacing_mm: (f64, f64, f64),
    intensity_space: IntensitySpace,
    data: Vec<f32>,
}

impl Volume {
    /// Build a volume, validating the type invariants: data length matches
    /// the shape, all values are finite, spacing is strictly positive.
    pub fn new(
        shape: (usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        intensity_space: IntensitySpace,
        data: Vec<f32>,
    ) -> Result<Self> {
        let (d, h, w) = shape;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidRange {
                what: "volume shape",
                details: format!("all dimensions must be positive, got {shape:?}"),
            });
        }
        if data.len() != d * h * w {
            return Err(Error::ShapeMismatch {
                what: "volume data",
                details: format!("shape {:?} needs {} values, got {}", shape, d * h * w, data.len()),
            });
        }
        check_spacing(spacing_mm)?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("volume construction (index {i})"),
            });
        }
        Ok(Volume {
            shape,
            spacing_mm,
            intensity_space,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn spacing_mm(&self) -> (f64, f64, f64) {
        self.spacing_mm
    }

    pub fn intensity_space(&self) -> IntensitySpace {
        self.intensity_space
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        let (_, h, w) = self.shape;
        (z * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Same grid and spacing, different values and/or intensity tag.
    pub fn with_data(&self, intensity_space: IntensitySpace, data: Vec<f32>) -> Result<Self> {
        Volume::new(self.shape, self.spacing_mm, intensity_space, data)
    }

    /// Copy out the values of the patch window starting at `origin`.
    pub fn extract_patch(
        &self,
        origin: (usize, usize, usize),
        size: (usize, usize, usize),
    ) -> Result<Vec<f32>> {
        let (d, h, w) = self.shape;
        let (oz, oy, ox) = origin;
        let (pd, ph, pw) = size;
        if oz + pd > d || oy + ph > h || ox + pw > w {
            return Err(Error::OutOfBounds {
                what: "patch window",
                details: format!("origin {origin:?} + size {size:?} exceeds shape {:?}", self.shape),
            });
        }
        let mut out = Vec::with_capacity(pd * ph * pw);
        for z in oz..oz + pd {
            for y in oy..oy + ph {
                let row = self.index(z, y, ox);
                out.extend_from_slice(&self.data[row..row + pw]);
            }
        }
        Ok(out)
    }
}

/// Boolean grid paired with a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    shape: (usize, usize, usize),
    spacing_mm: (f64, f64, f64),
    data: Vec<bool>,
}

impl Mask {
    pub fn new(
        shape: (usize, usize, usize),
        spacing_mm: (f64, f64, f64),
        data: Vec<bool>,
    ) -> Result<Self> {
        let (d, h, w) = shape;
        if data.len() != d * h * w {
            return Err(Error::ShapeMismatch {
                what: "mask data",
                details: format!("shape {:?} needs {} values, got {}", shape, d * h * w, data.len()),
            });
        }
        check_spacing(spacing_mm)?;
        Ok(Mask {
            shape,
            spacing_mm,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn spacing_mm(&self) -> (f64, f64, f64) {
        self.spacing_mm
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        let (_, h, w) = self.shape;
        (z * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// The mask must pair exactly with the volume's grid.
    pub fn matches(&self, v: &Volume) -> bool {
        self.shape == v.shape() && self.spacing_mm == v.spacing_mm()
    }
}

/// Affine normalization statistics, persisted alongside a preprocessed
/// dataset so inference can reverse the normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub scope: StatsScope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StatsScope {
    #[serde(rename = "PER_SCAN")]
    PerScan,
    #[serde(rename = "DATASET")]
    Dataset,
}

impl NormStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) {
            return Err(Error::InvalidRange {
                what: "norm stats std",
                details: format!("std must be positive, got {}", self.std),
            });
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::InvalidRange {
                what: "norm stats clip",
                details: format!("clip_lo {} must be < clip_hi {}", self.clip_lo, self.clip_hi),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, "stats", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: NormStats =
            serde_json::from_str(&text).map_err(|e| Error::format(path, "stats", e.to_string()))?;
        stats.validate()?;
        Ok(stats)
    }
}

fn check_spacing(spacing: (f64, f64, f64)) -> Result<()> {
    let (sz, sy, sx) = spacing;
    if !(sz > 0.0 && sy > 0.0 && sx > 0.0) || !(sz.is_finite() && sy.is_finite() && sx.is_finite())
    {
        return Err(Error::InvalidRange {
            what: "voxel spacing",
            details: format!("all components must be strictly positive, got {spacing:?}"),
        });
    }
    Ok(())
}

/// Clamp CT intensities to `[lo, hi]`. Values already inside the range are
/// unchanged, so the operation is idempotent.
pub fn clip_hu(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidRange {
            what: "clip bounds",
            details: format!("lo {lo} must be < hi {hi}"),
        });
    }
    let data = v.data().iter().map(|&x| x.clamp(lo, hi)).collect();
    v.with_data(IntensitySpace::Hu, data)
}

/// `clip_hu` with the standard CT bounds.
pub fn clip_hu_default(v: &Volume) -> Result<Volume> {
    clip_hu(v, hu::CLIP_LO, hu::CLIP_HI)
}

const DEGENERATE_STD: f64 = 1e-8;

fn mean_std(chunks: &[&[f32]]) -> (f64, f64, usize) {
    // Two-pass population statistics in f64, fixed accumulation order.
    let n: usize = chunks.iter().map(|c| c.len()).sum();
    let mut sum = 0.0f64;
    for c in chunks {
        for &v in *c {
            sum += v as f64;
        }
    }
    let mean = sum / n as f64;
    let mut ss = 0.0f64;
    for c in chunks {
        for &v in *c {
            let d = v as f64 - mean;
            ss += d * d;
        }
    }
    (mean, (ss / n as f64).sqrt(), n)
}

fn normalized_values(v: &Volume, mean: f64, std: f64) -> Vec<f32> {
    v.data()
        .iter()
        .map(|&x| ((x as f64 - mean) / std) as f32)
        .collect()
}

/// Per-scan z-score normalization. Statistics are the scan's own population
/// mean/std; constant scans are rejected as data errors.
pub fn zscore_per_scan(v: &Volume) -> Result<(Volume, NormStats)> {
    let (mean, std, _) = mean_std(&[v.data()]);
    if std < DEGENERATE_STD {
        return Err(Error::DegenerateInput {
            what: "per-scan z-score",
            details: format!("volume is (nearly) constant: std = {std:.3e}"),
        });
    }
    let stats = NormStats {
        mean,
        std,
        clip_lo: hu::CLIP_LO as f64,
        clip_hi: hu::CLIP_HI as f64,
        scope: StatsScope::PerScan,
    };
    let out = v.with_data(IntensitySpace::Normalized, normalized_values(v, mean, std))?;
    Ok((out, stats))
}

/// Dataset-level z-score normalization: statistics pooled over the union of
/// all voxels of all volumes. Inputs must already be clipped HU.
pub fn zscore_dataset(vols: &[Volume]) -> Result<(Vec<Volume>, NormStats)> {
    if vols.is_empty() {
        return Err(Error::DegenerateInput {
            what: "dataset z-score",
            details: "empty volume collection".into(),
        });
    }
    for v in vols {
        if v.intensity_space() != IntensitySpace::Hu {
            return Err(Error::IntensitySpace {
                expected: "HU",
                got: v.intensity_space().to_string(),
            });
        }
    }
    let chunks: Vec<&[f32]> = vols.iter().map(|v| v.data()).collect();
    let (mean, std, _) = mean_std(&chunks);
    if std < DEGENERATE_STD {
        return Err(Error::DegenerateInput {
            what: "dataset z-score",
            details: format!("pooled values are (nearly) constant: std = {std:.3e}"),
        });
    }
    let stats = NormStats {
        mean,
        std,
        clip_lo: hu::CLIP_LO as f64,
        clip_hi: hu::CLIP_HI as f64,
        scope: StatsScope::Dataset,
    };
    let out = vols
        .iter()
        .map(|v| v.with_data(IntensitySpace::Normalized, normalized_values(v, mean, std)))
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}

/// Reverse normalization followed by clipping: `clip(v * std + mean)`.
pub fn denormalize(v: &Volume, stats: &NormStats) -> Result<Volume> {
    stats.validate()?;
    let data = v
        .data()
        .iter()
        .map(|&x| ((x as f64 * stats.std + stats.mean).clamp(stats.clip_lo, stats.clip_hi)) as f32)
        .collect();
    v.with_data(IntensitySpace::Hu, data)
}

/// Trilinear resampling onto a new voxel spacing. Voxel `i` sits at physical
/// coordinate `i * spacing`; samples outside the grid clamp to the border.
pub fn resample_trilinear(v: &Volume, new_spacing_mm: (f64, f64, f64)) -> Result<Volume> {
    check_spacing(new_spacing_mm)?;
    let (d, h, w) = v.shape();
    let (sz, sy, sx) = v.spacing_mm();
    let (nz, ny, nx) = new_spacing_mm;

    if (sz, sy, sx) == (nz, ny, nx) {
        return Ok(v.clone());
    }

    let out_shape = (
        ((d as f64 * sz / nz).round() as usize).max(1),
        ((h as f64 * sy / ny).round() as usize).max(1),
        ((w as f64 * sx / nx).round() as usize).max(1),
    );
    let (od, oh, ow) = out_shape;
    let mut data = Vec::with_capacity(od * oh * ow);

    // Continuous source index for output index i along one axis.
    let src = |i: usize, new_sp: f64, old_sp: f64, n: usize| -> (usize, usize, f64) {
        let c = (i as f64 * new_sp / old_sp).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };

    for z in 0..od {
        let (z0, z1, fz) = src(z, nz, sz, d);
        for y in 0..oh {
            let (y0, y1, fy) = src(y, ny, sy, h);
            for x in 0..ow {
                let (x0, x1, fx) = src(x, nx, sx, w);
                let c000 = v.at(z0, y0, x0) as f64;
                let c001 = v.at(z0, y0, x1) as f64;
                let c010 = v.at(z0, y1, x0) as f64;
                let c011 = v.at(z0, y1, x1) as f64;
                let c100 = v.at(z1, y0, x0) as f64;
                let c101 = v.at(z1, y0, x1) as f64;
                let c110 = v.at(z1, y1, x0) as f64;
                let c111 = v.at(z1, y1, x1) as f64;
                let c00 = c000 + (c001 - c000) * fx;
                let c01 = c010 + (c011 - c010) * fx;
                let c10 = c100 + (c101 - c100) * fx;
                let c11 = c110 + (c111 - c110) * fx;
                let c0 = c00 + (c01 - c00) * fy;
                let c1 = c10 + (c11 - c10) * fy;
                data.push((c0 + (c1 - c0) * fz) as f32);
            }
        }
    }

    Volume::new(out_shape, new_spacing_mm, v.intensity_space(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, shape: (usize, usize, usize), lo: f32, hi: f32) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Volume::new(shape, (3.0, 1.0, 1.0), IntensitySpace::Hu, data).unwrap()
    }

    #[test]
    fn clip_hu_bounds() {
        let v = Volume::new(
            (1, 1, 3),
            (1.0, 1.0, 1.0),
            IntensitySpace::Hu,
            vec![2000.0, 0.0, -2000.0],
        )
        .unwrap();
        let c = clip_hu_default(&v).unwrap();
        assert_eq!(c.data(), &[1500.0, 0.0, -1024.0]);
    }

    #[test]
    fn clip_hu_idempotent() {
        let v = random_volume(7, (4, 5, 6), -3000.0, 3000.0);
        let once = clip_hu_default(&v).unwrap();
        let twice = clip_hu_default(&once).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn clip_hu_invalid_bounds() {
        let v = random_volume(1, (2, 2, 2), 0.0, 1.0);
        assert!(matches!(
            clip_hu(&v, 10.0, 10.0),
            Err(Error::InvalidRange { .. })
        ));
    }

    #[test]
    fn zscore_two_point_symmetry() {
        let v = Volume::new(
            (1, 1, 2),
            (1.0, 1.0, 1.0),
            IntensitySpace::MriRaw,
            vec![1.0, 3.0],
        )
        .unwrap();
        let (out, stats) = zscore_per_scan(&v).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
        assert!((stats.mean - 2.0).abs() < 1e-12);
        assert!((stats.std - 1.0).abs() < 1e-12);
        assert_eq!(stats.scope, StatsScope::PerScan);
    }

    #[test]
    fn zscore_matches_two_pass_oracle() {
        let v = random_volume(11, (8, 8, 8), -500.0, 900.0);
        let (out, stats) = zscore_per_scan(&v).unwrap();

        // Independent two-pass oracle over the raw values.
        let n = v.len() as f64;
        let mean_o: f64 = v.data().iter().map(|&x| x as f64).sum::<f64>() / n;
        let var_o: f64 = v
            .data()
            .iter()
            .map(|&x| (x as f64 - mean_o).powi(2))
            .sum::<f64>()
            / n;
        let std_o = var_o.sqrt();
        assert!((stats.mean - mean_o).abs() / mean_o.abs().max(1.0) < 1e-6);
        assert!((stats.std - std_o).abs() / std_o < 1e-6);
        for (o, &x) in out.data().iter().zip(v.data()) {
            let expect = (x as f64 - mean_o) / std_o;
            assert!((*o as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn zscore_output_is_standardized() {
        for seed in 0..5u64 {
            let v = random_volume(seed, (6, 7, 5), -100.0, 350.0);
            let (out, _) = zscore_per_scan(&v).unwrap();
            let (m, s, _) = mean_std(&[out.data()]);
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((s - 1.0).abs() < 1e-5, "std {s}");
        }
    }

    #[test]
    fn zscore_rejects_constant_volume() {
        let v = Volume::new(
            (2, 2, 2),
            (1.0, 1.0, 1.0),
            IntensitySpace::MriRaw,
            vec![5.0; 8],
        )
        .unwrap();
        assert!(matches!(
            zscore_per_scan(&v),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn zscore_dataset_single_volume_equals_per_scan() {
        let v = random_volume(3, (5, 4, 6), -800.0, 1200.0);
        let (outs, ds) = zscore_dataset(std::slice::from_ref(&v)).unwrap();
        let (per, ps) = zscore_per_scan(&v).unwrap();
        assert_eq!(outs[0].data(), per.data());
        assert_eq!(ds.mean, ps.mean);
        assert_eq!(ds.std, ps.std);
        assert_eq!(ds.scope, StatsScope::Dataset);
    }

    #[test]
    fn zscore_dataset_hand_pooling() {
        let make = |value: f32| {
            Volume::new(
                (1, 1, 2),
                (1.0, 1.0, 1.0),
                IntensitySpace::Hu,
                vec![value, value],
            )
            .unwrap()
        };
        let (outs, stats) = zscore_dataset(&[make(0.0), make(2.0)]).unwrap();
        assert!((stats.mean - 1.0).abs() < 1e-12);
        assert!((stats.std - 1.0).abs() < 1e-12);
        assert_eq!(outs[0].data(), &[-1.0, -1.0]);
        assert_eq!(outs[1].data(), &[1.0, 1.0]);
    }

    #[test]
    fn zscore_dataset_empty_is_error() {
        assert!(matches!(
            zscore_dataset(&[]),
            Err(Error::DegenerateInput { .. })
        ));
    }

    #[test]
    fn denormalize_affine_and_clip() {
        let stats = NormStats {
            mean: 40.0,
            std: 300.0,
            clip_lo: -1024.0,
            clip_hi: 1500.0,
            scope: StatsScope::Dataset,
        };
        let v = Volume::new(
            (1, 1, 2),
            (1.0, 1.0, 1.0),
            IntensitySpace::Normalized,
            vec![0.0, 10.0],
        )
        .unwrap();
        let out = denormalize(&v, &stats).unwrap();
        // 0 -> mean; 10 -> 3040 clipped to 1500.
        assert_eq!(out.data(), &[40.0, 1500.0]);
        assert_eq!(out.intensity_space(), IntensitySpace::Hu);
    }

    #[test]
    fn dataset_roundtrip_recovers_clipped_inputs() {
        let vols: Vec<Volume> = (0..3)
            .map(|s| {
                let v = random_volume(40 + s, (6, 6, 6), -1500.0, 1800.0);
                clip_hu_default(&v).unwrap()
            })
            .collect();
        let (norm, stats) = zscore_dataset(&vols).unwrap();
        for (n, orig) in norm.iter().zip(&vols) {
            let back = denormalize(n, &stats).unwrap();
            for (&a, &b) in back.data().iter().zip(orig.data()) {
                assert!((a - b).abs() < 1e-4, "roundtrip error {} vs {}", a, b);
            }
        }
    }

    #[test]
    fn resample_identity_spacing_is_bit_identical() {
        let v = random_volume(5, (4, 6, 5), -100.0, 100.0);
        let r = resample_trilinear(&v, v.spacing_mm()).unwrap();
        assert_eq!(v.data(), r.data());
        assert_eq!(v.shape(), r.shape());
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = Volume::new(
            (4, 4, 4),
            (2.0, 2.0, 2.0),
            IntensitySpace::Hu,
            vec![42.0; 64],
        )
        .unwrap();
        let r = resample_trilinear(&v, (1.0, 3.0, 1.5)).unwrap();
        assert!(r.data().iter().all(|&x| (x - 42.0).abs() < 1e-6));
    }

    #[test]
    fn resample_linear_ramp_matches_analytic() {
        // f(x_phys) = 10 + 2 * x_phys along x, spacing 2mm.
        let (d, h, w) = (2, 2, 8);
        let mut data = Vec::new();
        for _ in 0..d * h {
            for x in 0..w {
                data.push(10.0 + 2.0 * (x as f32 * 2.0));
            }
        }
        let v = Volume::new((d, h, w), (1.0, 1.0, 2.0), IntensitySpace::Hu, data).unwrap();
        let r = resample_trilinear(&v, (1.0, 1.0, 1.0)).unwrap();
        let (_, _, rw) = r.shape();
        assert_eq!(rw, 16);
        for x in 0..rw {
            let phys = x as f64 * 1.0;
            // Border clamp: beyond the last source sample the ramp flattens.
            let expect = 10.0 + 2.0 * phys.min(14.0);
            assert!(
                (r.at(0, 0, x) as f64 - expect).abs() < 1e-5,
                "x={x}: {} vs {expect}",
                r.at(0, 0, x)
            );
        }
    }

    #[test]
    fn resample_rejects_bad_spacing() {
        let v = random_volume(2, (3, 3, 3), 0.0, 1.0);
        assert!(matches!(
            resample_trilinear(&v, (0.0, 1.0, 1.0)),
            Err(Error::InvalidRange { .. })
        ));
    }

    #[test]
    fn shape_payload_mismatch_is_error() {
        assert!(matches!(
            Volume::new((2, 2, 2), (1.0, 1.0, 1.0), IntensitySpace::Hu, vec![0.0; 7]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn extract_patch_copies_window() {
        let v = random_volume(9, (4, 4, 4), 0.0, 1.0);
        let p = v.extract_patch((1, 2, 0), (2, 2, 3)).unwrap();
        assert_eq!(p.len(), 12);
        assert_eq!(p[0], v.at(1, 2, 0));
        assert_eq!(p[11], v.at(2, 3, 2));
        assert!(v.extract_patch((3, 3, 3), (2, 2, 2)).is_err());
    }
}
