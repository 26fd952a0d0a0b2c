//! Error type shared across the toolkit.
//!
//! Errors fall into three families that the CLI maps to distinct exit
//! codes: configuration problems (rejected parameters, incompatible
//! checkpoints), data problems (missing or malformed files, shape
//! mismatches), and numerical failures (diverged training, non-finite
//! values where finite ones are required).

use std::path::PathBuf;
use thiserror::Error;

/// Toolkit-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameter or configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed, missing, or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (divergence, non-finite values).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// I/O failure, always carrying the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// Path the failed operation touched.
        path: PathBuf,
        /// Underlying OS error.
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code the CLI uses for this error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
