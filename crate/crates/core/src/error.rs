use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {dimension}: expected {expected}, got {actual}")]
    ShapeMismatch {
        dimension: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),

    #[error("{axis} extent {extent} is not divisible by block size {block}")]
    NotDivisible {
        axis: &'static str,
        extent: usize,
        block: usize,
    },

    #[error("invalid metric input: {0}")]
    Metric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: malformed image: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error("{}: unsupported image: {reason}", path.display())]
    Unsupported { path: PathBuf, reason: String },

    #[error("image of {height}x{width} is smaller than the {crop}x{crop} crop")]
    TooSmall {
        height: usize,
        width: usize,
        crop: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },

    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(dimension: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch {
            dimension: dimension.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
