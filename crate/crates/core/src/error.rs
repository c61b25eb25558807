use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box {0:?}")]
    InvalidBox([f64; 4]),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("mask shape mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    MaskShape {
        left_width: u32,
        left_height: u32,
        right_width: u32,
        right_height: u32,
    },

    #[error("invalid confidence {0} (must lie in [0, 1])")]
    InvalidConfidence(f64),

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("no ground truth for image `{0}`")]
    MissingGroundTruth(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: truncated final line (interrupted write?)")]
    Truncated { path: PathBuf, line: usize },

    #[error("model adapter failed in round {round}: {message}")]
    Adapter { round: usize, message: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class: configuration 2, I/O 3, anything else 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::Truncated { .. } => 3,
            _ => 4,
        }
    }
}
