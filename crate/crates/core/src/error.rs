use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("source iteration did not converge after {sweeps} sweeps (last relative update {residual:.3e})")]
    IterationLimit { sweeps: usize, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("truncation level L={requested} exceeds the usable rank {rank} of A")]
    Truncation { requested: usize, rank: usize },

    #[error("cache format version {found} is not supported (expected {expected})")]
    CacheVersion { found: u32, expected: u32 },

    #[error("cache was built for different grids (stored hash {stored}, expected {expected})")]
    CacheHashMismatch { stored: String, expected: String },

    #[error("cache file is truncated: need {needed} bytes, found {found}")]
    CacheTruncated { needed: u64, found: u64 },

    #[error("cache file is corrupt: {0}")]
    CacheCorrupt(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
