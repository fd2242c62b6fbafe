//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: String, detail: String },

    #[error("non-finite value in {context}: parameter `{name}`")]
    NonFinite { context: String, name: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{0} is infeasible under the configured holdout")]
    InfeasibleCategory(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch { op: op.to_string(), detail: detail.into() }
    }

    pub fn invalid(op: &str, detail: impl Into<String>) -> Self {
        CoreError::InvalidArgument { op: op.to_string(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
