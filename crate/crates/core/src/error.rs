use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("zero-sized dimension in {0}")]
    ZeroDimension(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("cache does not belong to this operator state ({0})")]
    StaleCache(String),

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted { epoch: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Failures reading the manifest + blob on-disk format.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("truncated payload while reading {0}")]
    Truncated(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("malformed array record: {0}")]
    Record(String),
}

impl FormatError {
    /// Stable numeric code, one per failure class.
    pub fn code(&self) -> u8 {
        match self {
            FormatError::BadMagic(_) => 10,
            FormatError::VersionMismatch { .. } => 11,
            FormatError::ChecksumMismatch { .. } => 12,
            FormatError::Truncated(_) => 13,
            FormatError::Manifest(_) => 14,
            FormatError::Record(_) => 15,
        }
    }
}

pub(crate) fn check_dim(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context: context.to_string(),
            expected,
            actual,
        });
    }
    Ok(())
}
