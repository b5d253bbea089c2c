use std::path::PathBuf;

use thiserror::Error;

/// Checkpoint decoding failures, kept distinct so callers can report them.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointErrorKind {
    #[error("bad magic bytes or unsupported format version")]
    Version,
    #[error("file is truncated")]
    Truncated,
    #[error("tensor shape does not match the model")]
    Shape,
    #[error("malformed contents")]
    Malformed,
}

#[derive(Debug, Error)]
pub enum HtrError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("target of {label_len} labels needs {required} frames, only {frames} available")]
    InfeasibleTarget {
        label_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint {kind}: {detail}")]
    Checkpoint {
        kind: CheckpointErrorKind,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl HtrError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            HtrError::Config(_) | HtrError::Shape(_) => 2,
            HtrError::Numeric(_) => 4,
            HtrError::Data(_)
            | HtrError::Manifest { .. }
            | HtrError::OutOfVocabulary(_)
            | HtrError::InfeasibleTarget { .. }
            | HtrError::Checkpoint { .. }
            | HtrError::Io { .. }
            | HtrError::Image { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HtrError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn checkpoint(kind: CheckpointErrorKind, detail: impl Into<String>) -> Self {
        HtrError::Checkpoint {
            kind,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = HtrError> = std::result::Result<T, E>;
