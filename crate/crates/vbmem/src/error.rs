//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by constructors, inference, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition (dimension mismatch,
    /// non-positive-definite covariance, bad hyperparameter, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A JSON document does not match the expected schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// Codes within one episode do not share a common dimension.
    #[error("non-uniform code dimension: expected {expected}, found {found} at timestep {timestep}")]
    NonUniformCodeDim {
        expected: usize,
        found: usize,
        timestep: usize,
    },

    /// A code variance entry is negative.
    #[error("negative variance at coordinate {coord}: {value}")]
    NegativeVariance { coord: usize, value: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
