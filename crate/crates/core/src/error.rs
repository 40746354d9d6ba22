use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} channel(s), got {got}")]
    ChannelCount { expected: usize, got: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension {dim} is not divisible by {divisor}")]
    NotDivisible { dim: usize, divisor: usize },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed image file: {0}")]
    MalformedImage(String),

    #[error("truncated image file: {0}")]
    TruncatedImage(String),

    #[error("image dimensions do not match pixel data: {0}")]
    ImageDimensions(String),

    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("gradient self-check failed: {0}")]
    GradientCheck(String),

    #[error("cannot access {path}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
