//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by the toolkit.
///
/// Variants map onto the CLI failure classes: configuration/validation
/// problems, I/O problems, and numerical failures detected at runtime.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument, configuration value or malformed input data.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Shape mismatch between tensors or between a tensor and a spec.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite value or other numerical failure.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Filesystem or serialization failure, with the offending path.
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Data integrity failure (checksum mismatch, corrupted record).
    #[error("data integrity: {0}")]
    Integrity(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}
