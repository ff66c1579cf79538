use thiserror::Error;

/// Errors raised by the control engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite output from {0}")]
    NonFiniteOutput(String),

    /// Integration blew up. Reduce `dt` or the integration window.
    #[error("non-finite state at integration step {step}: {state:?}")]
    NonFiniteState { step: usize, state: Vec<f64> },

    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("bad topology: {0}")]
    BadTopology(String),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("initial state violates the constraint set")]
    IneligibleStart,

    #[error("control failed at iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no valid benchmark instance after {attempts} attempts (n={n}, seed={seed})")]
    GenerationFailed { n: usize, seed: u64, attempts: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid config: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
