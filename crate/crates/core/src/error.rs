use thiserror::Error;

use crate::autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("diffusion matrix is singular at time index {time_index}, path {path}")]
    SingularDiffusion { time_index: usize, path: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("problem does not supply {0}")]
    MissingDerivative(&'static str),
    #[error("no reference solution available: {0}")]
    MissingReference(String),
    #[error("learning-rate step {step} outside 1..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("Monte-Carlo weights degenerated to zero")]
    DegenerateWeights,
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("{0} requires a non-empty input")]
    Empty(&'static str),
    #[error("training aborted at step {step} after {attempts} attempts: {source}")]
    TrainingAborted {
        step: usize,
        attempts: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
