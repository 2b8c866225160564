use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: String },

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("occlusion ratio {ratio:.4} outside bounds ({min}, {max})")]
    OcclusionRatio { ratio: f64, min: f64, max: f64 },

    #[error("{op}: empty mask")]
    EmptyMask { op: &'static str },

    #[error("contextual attention: no valid background patch")]
    NoValidPatch,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("annotations: {0}")]
    Annotations(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image: {0}")]
    Image(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of numeric integrity (NaN/Inf, gradient misuse)
    /// as opposed to bad inputs or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Autograd(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
