use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid hyperparameter for {op}: {detail}")]
    InvalidHyperparameter { op: &'static str, detail: String },

    #[error("batchnorm in train mode needs at least 2 values per channel, got {count}")]
    DegenerateBatch { count: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    StaleTape,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),

    #[error("malformed {kind} data: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
