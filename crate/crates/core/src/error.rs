use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no samples found in {0}")]
    NoSamples(PathBuf),

    #[error("missing mask for image stem '{0}'")]
    MissingMask(String),

    #[error("unknown class '{0}'")]
    UnknownClass(String),

    #[error("image listed in CSV but absent on disk: {0}")]
    MissingImage(PathBuf),

    #[error("failed to decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite {what} at {context}")]
    NonFinite { what: String, context: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("normalization policy mismatch: checkpoint uses {checkpoint}, request uses {requested}")]
    PolicyMismatch { checkpoint: String, requested: String },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
