use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the analysis stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected \"SPECTRA1\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("truncated trace file: {0}")]
    Truncated(String),

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("invalid trace: {}", .0.join("; "))]
    InvalidTrace(Vec<String>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("layer {layer} is not captured in this trace")]
    InvalidLayer { layer: usize },

    #[error("token range [{start}, {end}) is empty or too short (need at least {needed} tokens)")]
    EmptyRange { start: usize, end: usize, needed: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no convergence after {iterations} iterations (best objective {best_objective:e})")]
    NonConvergence {
        iterations: usize,
        best_objective: f64,
        /// Best parameter vector seen before giving up.
        best_params: Vec<f64>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for numeric failures that are not caused by malformed input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonConvergence { .. })
    }
}
