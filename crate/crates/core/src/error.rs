use thiserror::Error;

/// Errors raised by the solvers, policies and experiment harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got} ({what})")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("scenario tree needs {requested} nodes, over the budget of {budget}")]
    NodeBudget { requested: u128, budget: usize },

    #[error("non-finite {what} at particle {particle}, stage {stage}")]
    NonFinite {
        what: &'static str,
        particle: usize,
        stage: usize,
    },

    #[error("non-finite state passed to policy at stage {stage}")]
    NonFiniteQuery { stage: usize },

    #[error("stage {stage} out of range (horizon {horizon})")]
    StageOutOfRange { stage: usize, horizon: usize },

    #[error("stage {0} has no (state, control) pairs")]
    EmptyStage(usize),

    #[error("rate fit needs at least 3 positive points: {0}")]
    RateFit(String),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
