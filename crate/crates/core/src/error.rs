use std::path::PathBuf;

/// Errors produced across the ego-path pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate polyline: {0}")]
    DegeneratePolyline(String),

    #[error("invalid crop region: {0}")]
    InvalidCrop(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("invalid annotation {id}: {reason}")]
    InvalidAnnotation { id: String, reason: String },

    #[error("malformed annotation file {path}: {}", .records.join("; "))]
    MalformedAnnotations { path: PathBuf, records: Vec<String> },

    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported backbone `{0}`")]
    UnsupportedBackbone(String),

    #[error("no usable sample after {attempts} crop draws for {id}")]
    SampleExhausted { id: String, attempts: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
