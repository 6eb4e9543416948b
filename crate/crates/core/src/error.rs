use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("infeasible alignment: {labels} labels need at least {needed} frames, got {frames}")]
    InfeasibleAlignment {
        labels: usize,
        needed: usize,
        frames: usize,
    },

    #[error("label {label} out of range [0, {limit})")]
    Label { label: usize, limit: usize },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("non-finite value in {term}: {value}")]
    Numeric { term: String, value: f64 },

    #[error("diverged at step {step}: {term} = {value}")]
    Divergence { step: u64, term: String, value: f64 },

    #[error("expert partition error: {0}")]
    Partition(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("synchronization error: {0}")]
    Sync(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable category name, used as the machine-parsable prefix of CLI errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::EmptySequence(_) => "empty-sequence",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::InfeasibleAlignment { .. } => "infeasible-alignment",
            Error::Label { .. } => "label",
            Error::Degenerate(_) => "degenerate",
            Error::Numeric { .. } => "numeric",
            Error::Divergence { .. } => "divergence",
            Error::Partition(_) => "partition",
            Error::Transport(_) => "transport",
            Error::Sync(_) => "sync",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
