use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid perturbation spec: {0}")]
    InvalidSpec(String),

    #[error("out of domain: {0}")]
    OutOfDomain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("undefined variance: dimension {0} < 2")]
    UndefinedVariance(usize),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("sample diverged at timestep {timestep}")]
    DivergedSample { timestep: usize },

    #[error("out of regime: {0}")]
    OutOfRegime(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("artifact already exists: {0}")]
    ArtifactExists(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Coarse category used for process exit codes and the C error enum.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => ErrorCategory::Config,
            Error::Io(_) | Error::ArtifactExists(_) => ErrorCategory::Io,
            Error::Divergence { .. } | Error::DivergedSample { .. } => ErrorCategory::Diverged,
            _ => ErrorCategory::Invariant,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Invariant,
    Diverged,
}
