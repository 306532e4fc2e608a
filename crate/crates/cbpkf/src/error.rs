//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by simulation, filtering, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or parameter set.
    #[error("configuration error: {0}")]
    Config(String),

    /// Matrix or vector dimensions do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A linear solve or factorization failed.
    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: &'static str, detail: String },

    /// Rejection sampling exceeded its draw cap; the bounds are unreachable
    /// from the base value with the given noise scale.
    #[error("degenerate parameter configuration: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Dimension {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn numerical(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context,
            detail: detail.into(),
        }
    }
}
