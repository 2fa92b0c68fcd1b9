use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CarlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CarlError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: bad magic, expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: unsupported format version {found} (this build reads {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("{path}: truncated, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: non-finite value at element {index}")]
    NonFinite { path: PathBuf, index: usize },

    #[error("{path}: wavelengths are not strictly increasing and positive at channel {index}")]
    NonMonotoneWavelengths { path: PathBuf, index: usize },

    #[error("{path}: malformed content: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),

    #[error("tensor {name:?}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CarlError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CarlError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        CarlError::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CarlError::Config(msg.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CarlError::Shape { .. }
            | CarlError::Axis { .. }
            | CarlError::Validation(_)
            | CarlError::Config(_)
            | CarlError::TensorShape { .. }
            | CarlError::MissingTensor(_) => 2,
            CarlError::Numeric(_) => 4,
            _ => 3,
        }
    }
}
