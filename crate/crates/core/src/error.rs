use thiserror::Error;

use crate::solvers::SolveResult;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("normal equations are singular for task {task}")]
    DegenerateTask { task: usize },

    /// A solver produced a non-finite factor entry. The partial run up to the
    /// last finite iterate is kept so callers can still report it.
    #[error("diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        partial: Box<SolveResult>,
    },

    #[error("insufficient data: needed {needed} samples, stream ended after {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed dataset container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
