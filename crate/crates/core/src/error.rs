//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed something structurally wrong (empty input, mismatched
    /// dimensions, non-finite values, out-of-range parameters).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A feature file failed to parse. `offset` is the byte position at
    /// which the reader gave up.
    #[error("{}: format error at byte {offset}: {reason}", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    /// Manifest or dataset inconsistency.
    #[error("data error: {0}")]
    Data(String),

    /// Optimization diverged or a solver failed to reach its tolerance.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
