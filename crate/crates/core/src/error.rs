//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the domain types, file formats, and dataset handling.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A configuration value violated its documented constraints.
    #[error("configuration error: {0}")]
    Config(String),

    /// A domain invariant was violated while constructing a value.
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    /// A tensor file could not be decoded. The offset is the byte position
    /// at which decoding failed.
    #[error("tensor file format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// A sample referenced by a manifest failed to load.
    #[error("sample '{id}': {reason}")]
    Sample { id: String, reason: String },

    /// An I/O failure, annotated with the path involved.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A query over a report or dataset had an empty domain.
    #[error("query error: {0}")]
    Query(String),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        CoreError::Invalid {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
