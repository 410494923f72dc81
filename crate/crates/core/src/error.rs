use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty distribution")]
    EmptyDistribution,

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("shape mismatch in {context}: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("not differentiable: {0}")]
    NotDifferentiable(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint truncated: missing payload for tensor `{0}`")]
    MissingTensor(String),

    #[error("non-finite loss at batch {batch} (update {update})")]
    NonFiniteLoss { batch: usize, update: u64 },

    #[error("checkpoint has no reconstructor parameters; required when lambda > 0")]
    MissingReconstructor,

    #[error("gradient check failed for: {0}")]
    GradCheckFailed(String),
}

/// Process exit categories used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_kind(&self) -> ExitKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::MissingReconstructor => {
                ExitKind::Usage
            }
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteLogits
            | Error::GradCheckFailed(_)
            | Error::NotDifferentiable(_) => ExitKind::Numeric,
            _ => ExitKind::Data,
        }
    }
}
