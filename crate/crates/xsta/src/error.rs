//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },
    #[error("fully masked slice in {op}")]
    FullyMasked { op: &'static str },
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGrad(String),
    #[error("gradient check: two forward passes at the same point differ (non-deterministic f)")]
    NonDeterministic,
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
