use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the matching library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated or corrupt image: {0}")]
    Decode(String),
    #[error("zero-dimension image")]
    ZeroDimension,
    #[error("rectangle {rect:?} exceeds image bounds {width}x{height}")]
    OutOfBounds {
        rect: (i64, i64, i64, i64),
        width: usize,
        height: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular matrix (det = {0:e})")]
    Singular(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pair rejected: {0}")]
    Rejected(String),
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("missing gradient for `{0}`")]
    MissingGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
