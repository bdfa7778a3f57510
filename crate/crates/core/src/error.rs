use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gradient target must be 1x1, got {0}x{1}")]
    NonScalarTarget(usize, usize),

    #[error("variable was recorded on a different tape")]
    ForeignVar,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("every label is missing")]
    AllLabelsMissing,

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),

    #[error("matrix is singular or ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("attack aborted on graph {graph} at step {step}: {reason}")]
    AttackAborted {
        graph: usize,
        step: usize,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Other,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::InfeasibleSpec(_) => ErrorKind::Config,
            Error::Parse { .. } | Error::EmptyDataset | Error::AllLabelsMissing | Error::Checkpoint(_) | Error::Json(_) => {
                ErrorKind::Data
            }
            Error::NonFinite(_) | Error::IllConditioned(_) | Error::AttackAborted { .. } => ErrorKind::Numeric,
            Error::Shape { .. } | Error::NonScalarTarget(..) | Error::ForeignVar | Error::Io(_) => ErrorKind::Other,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
