//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for library operations.
///
/// Each variant carries a stable machine-readable code (the `code` method)
/// so the CLI can emit single-line parseable errors.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate gaussian: {0}")]
    DegenerateGaussian(String),

    #[error("dimension mismatch: {context} ({a_width}x{a_height} vs {b_width}x{b_height})")]
    DimensionMismatch {
        context: String,
        a_width: usize,
        a_height: usize,
        b_width: usize,
        b_height: usize,
    },

    #[error("empty valid region: {0}")]
    EmptyRegion(String),

    #[error("invalid depth {0}: must be > 0")]
    InvalidDepth(f64),

    #[error("splat-tile pair budget exceeded: {pairs} > cap {cap}")]
    CapacityExceeded { pairs: usize, cap: usize },

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("malformed camera {id}: {reason}")]
    MalformedCamera { id: String, reason: String },

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("unsupported cloud format: {0}")]
    CloudFormat(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("output directory is locked by another process: {0}")]
    OutputLocked(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl CoreError {
    /// Stable machine-readable error code for CLI reporting.
    pub fn code(&self) -> &'static str {
        match self {
            CoreError::InvalidParameter(_) => "invalid_parameter",
            CoreError::DegenerateGaussian(_) => "degenerate_gaussian",
            CoreError::DimensionMismatch { .. } => "dimension_mismatch",
            CoreError::EmptyRegion(_) => "empty_region",
            CoreError::InvalidDepth(_) => "invalid_depth",
            CoreError::CapacityExceeded { .. } => "capacity_exceeded",
            CoreError::MissingFile(_) => "missing_file",
            CoreError::MalformedCamera { .. } => "malformed_camera",
            CoreError::MalformedManifest(_) => "malformed_manifest",
            CoreError::CloudFormat(_) => "cloud_format",
            CoreError::Dataset(_) => "dataset",
            CoreError::OutputLocked(_) => "output_locked",
            CoreError::Io(_) => "io",
            CoreError::Json(_) => "json",
            CoreError::Image(_) => "image",
        }
    }
}
