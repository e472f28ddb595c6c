//! Core library for CPU-scale MRI-to-CT synthesis.
//!
//! The pipeline is organized around a small set of modules:
//!
//! - [`volume`]: 3D volumes with physical spacing and intensity semantics,
//!   normalization, resampling, and the on-disk container format.
//! - [`phantom`]: deterministic paired MRI/CT phantom generation.
//! - [`sampler`]: mask-constrained patch sampling and sliding-window inference.
//! - [`tensor`]: a dense-tensor engine with reverse-mode autodiff.
//! - [`ssm`]: selective state-space (Mamba-style) sequence blocks.
//! - [`model`]: the unet-lite / mamba-lite encoder-decoder networks.
//! - [`loss`]: the staged compound objective (weighted MAE, SSIM, feature loss).
//! - [`metrics`]: HU-space similarity and geometric-consistency evaluation.
//! - [`trainer`]: AdamW optimization with polynomial LR decay and checkpoints.
//! - [`verify`]: the 64-bit finite-difference verification suite.

pub mod error;
pub mod hu;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod sampler;
pub mod ssm;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod volume;

pub use error::{Error, Result};
