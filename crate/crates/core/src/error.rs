use thiserror::Error;

/// Recoverable failures. Contract violations (dimension mismatches, invalid
/// constructor arguments) panic instead.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite objective at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64, trace: Vec<f64> },

    #[error("non-finite target log-density at sample {index}")]
    NonFiniteTarget { index: usize, sample: Vec<f64> },

    #[error("training diverged twice (loss {loss} vs initial {initial})")]
    Diverged { loss: f64, initial: f64 },

    #[error("all importance weights are zero or non-finite")]
    DegenerateWeights,

    #[error("eigensolver did not converge after {sweeps} sweeps")]
    EigenNoConvergence { sweeps: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("score oracle error: {0}")]
    Oracle(String),

    #[error("malformed chain document: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
