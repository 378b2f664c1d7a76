use std::io;

use thiserror::Error;

/// Errors produced by the numerical core and its file formats.
#[derive(Debug, Error)]
pub enum NammError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numeric divergence: {0}")]
    Diverged(String),

    #[error("context overflow: position {position} exceeds max context {max_context}")]
    ContextOverflow { position: usize, max_context: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NammError>;

impl NammError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NammError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        NammError::Shape(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        NammError::Format {
            offset,
            message: msg.into(),
        }
    }
}
