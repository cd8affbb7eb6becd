use thiserror::Error;

use crate::mdp::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    Invalid(ValidationReport),
    #[error("singular linear system ({0})")]
    Singular(&'static str),
    #[error("soft value iteration hit the cap of {iters} iterations (residual {residual:e})")]
    IterationCap { iters: usize, residual: f64 },
    #[error("entropy undefined: pi(a={a}|s={s}) = 0")]
    EntropyUndefined { s: usize, a: usize },
    #[error("trajectory enumeration needs {count} sequences, budget is {budget}; use sample mode")]
    BudgetExceeded { count: f64, budget: usize },
    #[error("pi(a={a}|s={s}) = 0 on a visited pair; log-derivative undefined")]
    ZeroVisitedProbability { s: usize, a: usize },
    #[error("solver aborted at k={k}: {reason}")]
    Diverged { k: usize, reason: String },
    #[error("reward magnitude {value} exceeds declared bound C_r = {bound}")]
    RewardBound { value: f64, bound: f64 },
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
