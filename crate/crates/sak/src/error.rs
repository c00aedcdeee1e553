//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, missing fields, violated invariants.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure at runtime (non-finite values, zero norms, divergence).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A serialized file has a bad magic number or unsupported version.
    #[error("format error: {0}")]
    Format(String),

    /// A serialized file ended before its declared payload.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// A feature file's level set does not match the student configuration.
    #[error("level mismatch: {0}")]
    LevelMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for the CLI: 1 for configuration problems,
    /// 2 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
