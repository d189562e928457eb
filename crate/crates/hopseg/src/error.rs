//! Error types shared across the crate.
//!
//! Exit-code mapping lives here so the CLI and tests agree on it:
//! validation problems (bad arguments, malformed inputs, wrong state) map
//! to 1, runtime failures (numeric divergence, I/O, corrupt artifacts)
//! map to 2.

use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a precondition (shape mismatch, non-finite values, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value or argument is out of range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was called before its prerequisites were established.
    #[error("invalid state: {0}")]
    State(String),

    /// Numeric failure at runtime (divergence, non-finite loss).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A serialized artifact (manifest, checkpoint, config) could not be decoded.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Parameter(_) | Error::State(_) => 1,
            Error::Numeric(_) | Error::Io { .. } | Error::Format(_) => 2,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
