//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LdeError>;

#[derive(Debug, Error)]
pub enum LdeError {
    /// Tensor/shape preconditions (dimension mismatches, invalid extents).
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration or arguments caught before any work starts.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (manifests, embedding files, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    /// A split protocol cannot be satisfied by the given records.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Numeric failure at runtime (non-finite values, indefinite matrices).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LdeError {
    pub fn shape(msg: impl Into<String>) -> Self {
        LdeError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        LdeError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        LdeError::Data(msg.into())
    }

    pub fn protocol(msg: impl Into<String>) -> Self {
        LdeError::Protocol(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        LdeError::Numeric(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        LdeError::Checkpoint(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LdeError::Io { path: path.into(), source }
    }

    /// Process exit code contract: 1 for validation problems, 2 for
    /// runtime/numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LdeError::Shape(_)
            | LdeError::Config(_)
            | LdeError::Data(_)
            | LdeError::Protocol(_) => 1,
            LdeError::Numeric(_) | LdeError::Checkpoint(_) | LdeError::Io { .. } => 2,
        }
    }
}
