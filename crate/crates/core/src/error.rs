//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement; names the offending axis where known.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A layer or optimizer was configured with invalid parameters.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// An operation was called outside its supported state or configuration.
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward or backward pass produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Camera geometry violation (optical-center projection, out-of-fov unprojection).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Malformed input file; carries a line number when one is known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Dataset or experiment configuration rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint/dataset format or version incompatibility.
    #[error("version error: {0}")]
    Version(String),

    /// Requested data is missing or inconsistent.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::InvalidSpec(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
