//! Hounsfield-unit semantics shared by the loss bands, the surrogate
//! segmentation thresholds, and the similarity metrics.
//!
//! These constants are the single source of truth: the weight-map bands,
//! the bone/body threshold segmentation, and the PSNR/SSIM dynamic range all
//! refer to them.

/// Lower clip bound for CT intensities.
pub const CLIP_LO: f32 = -1024.0;

/// Upper clip bound for CT intensities.
pub const CLIP_HI: f32 = 1500.0;

/// Voxels strictly above this threshold are treated as bone.
pub const BONE_THRESHOLD: f32 = 300.0;

/// Voxels at or below this threshold are treated as air/background.
pub const AIR_THRESHOLD: f32 = -700.0;

/// Dynamic range of clipped CT volumes, used as the data range for PSNR and
/// as `L` in the SSIM stabilization constants.
pub const DATA_RANGE: f32 = CLIP_HI - CLIP_LO;

/// Loss weight for the bone band (t > 300).
pub const WEIGHT_BONE: f32 = 3.0;

/// Loss weight for the soft-tissue band (-700 < t <= 300).
pub const WEIGHT_SOFT: f32 = 1.5;

/// Loss weight for the air/background band (t <= -700).
pub const WEIGHT_AIR: f32 = 0.5;

/// Band weight for a single HU value.
#[inline]
pub fn band_weight(t: f32) -> f32 {
    if t > BONE_THRESHOLD {
        WEIGHT_BONE
    } else if t > AIR_THRESHOLD {
        WEIGHT_SOFT
    } else {
        WEIGHT_AIR
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_boundaries() {
        // Exact boundary semantics: strict at 300, inclusive-below at -700.
        assert_eq!(band_weight(301.0), WEIGHT_BONE);
        assert_eq!(band_weight(300.0), WEIGHT_SOFT);
        assert_eq!(band_weight(-699.0), WEIGHT_SOFT);
        assert_eq!(band_weight(-700.0), WEIGHT_AIR);
        assert_eq!(band_weight(-701.0), WEIGHT_AIR);
    }

    #[test]
    fn every_value_gets_exactly_one_band() {
        for &t in &[-1024.0f32, -700.5, -700.0, -699.5, 0.0, 299.5, 300.0, 300.5, 1500.0] {
            let w = band_weight(t);
            assert!(w == WEIGHT_BONE || w == WEIGHT_SOFT || w == WEIGHT_AIR);
        }
    }

    #[test]
    fn data_range_is_clip_width() {
        assert_eq!(DATA_RANGE, 2524.0);
    }
}
