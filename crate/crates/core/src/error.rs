//! Error types shared across the library.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric argument is outside its valid range (e.g. clip bounds,
    /// spacing, overlap fraction).
    #[error("invalid range for {what}: {details}")]
    InvalidRange { what: &'static str, details: String },

    /// The input is degenerate for the requested operation (constant scan,
    /// empty collection, empty mask, ...).
    #[error("degenerate input for {what}: {details}")]
    DegenerateInput { what: &'static str, details: String },

    /// Tensor/volume shapes do not line up.
    #[error("shape mismatch in {what}: {details}")]
    ShapeMismatch { what: &'static str, details: String },

    /// A window or patch does not fit inside the volume.
    #[error("out of bounds in {what}: {details}")]
    OutOfBounds { what: &'static str, details: String },

    /// An operation received a volume in the wrong intensity space.
    #[error("intensity space error: expected {expected}, got {got}")]
    IntensitySpace { expected: &'static str, got: String },

    /// A container / checkpoint / manifest file is malformed. Names the
    /// offending field.
    #[error("format error in {path}: field `{field}`: {details}")]
    Format {
        path: PathBuf,
        field: String,
        details: String,
    },

    /// The minimal neuroimaging importer hit a feature it does not support.
    #[error("unsupported feature in {path}: {details}")]
    Unsupported { path: PathBuf, details: String },

    /// Patch sampling could not satisfy the coverage constraint.
    #[error("patch sampling exhausted after {attempts} attempts (min coverage {min_coverage})")]
    SamplingExhausted { attempts: u32, min_coverage: f64 },

    /// A forward op produced NaN/Inf, or gradients became non-finite.
    #[error("non-finite value detected in `{op}`")]
    NonFinite { op: String },

    /// Misuse of the autodiff tape (non-scalar backward root, repeated
    /// backward, detached graph, cross-tape ops).
    #[error("autodiff usage error: {0}")]
    TapeUsage(String),

    /// Configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(
        path: impl Into<PathBuf>,
        field: impl Into<String>,
        details: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            field: field.into(),
            details: details.into(),
        }
    }
}
