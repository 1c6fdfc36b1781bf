use std::io;

use thiserror::Error;

/// Errors raised by engine, loss and metric operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or widths disagree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// An input violates an operation's preconditions.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// The input is well-formed but the quantity is undefined (zero scale, rank deficiency, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    /// A file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    /// True for errors that stem from the filesystem or from malformed files.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Parse(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_dim(actual: usize, expected: usize, what: &str) -> Result<()> {
    if actual == expected {
        Ok(())
    } else {
        Err(Error::dim(format!("{what}: expected {expected}, got {actual}")))
    }
}
