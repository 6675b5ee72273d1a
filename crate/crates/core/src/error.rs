use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SeldError>;

#[derive(Debug, Error)]
pub enum SeldError {
    /// An argument or input violates a documented precondition.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    /// A malformed row or record in a text input. `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl SeldError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        SeldError::Domain(msg.into())
    }

    /// True for failures of the underlying filesystem or stream, as opposed
    /// to invalid content.
    pub fn is_io(&self) -> bool {
        match self {
            SeldError::Io(_) => true,
            SeldError::Wav(hound::Error::IoError(_)) => true,
            SeldError::Json(e) => e.is_io(),
            _ => false,
        }
    }
}
