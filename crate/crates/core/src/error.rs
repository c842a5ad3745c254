use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("sequence length {len} exceeds limit {max}")]
    Length { len: usize, max: usize },

    #[error("incompatible adapter or weights: {0}")]
    Compatibility(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code for this error class: 1 validation/config,
    /// 2 data format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) | Error::Record { .. } => 2,
            Error::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }
}
