//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for tensor, operator, and model code.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration (non-divisible block counts, bad ranks, unknown
    /// target names, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value was produced or encountered; carries the name of
    /// the offending operation.
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// Calling a layer or model in a mode it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    /// File I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk data (bad magic, truncation, unknown entries).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }
}
