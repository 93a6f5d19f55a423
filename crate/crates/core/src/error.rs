use thiserror::Error;

/// Errors raised by scenario generation, rate computation and the solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("user {user} has zero rate on every (cell, pattern) pair")]
    ZeroRateUser { user: usize },

    #[error("degenerate allocation: user {user} has rate {rate}")]
    DegenerateAllocation { user: usize, rate: f64 },

    #[error("line search stalled at step {step:e} (gap direction {gap_dir:e})")]
    NumericalStall { step: f64, gap_dir: f64 },

    #[error("solver stalled at iteration {iteration} (step {step:e}, utility {utility}, gap {gap:e})")]
    Stalled {
        iteration: usize,
        step: f64,
        utility: f64,
        gap: f64,
        best: Box<crate::fw::Allocation>,
    },

    #[error("allocation infeasible: {0}")]
    Infeasible(String),

    #[error("inner solve not certified after {iterations} iterations (gap {gap:e} > {target:e})")]
    InnerSolve {
        iterations: usize,
        gap: f64,
        target: f64,
        best: Box<crate::fw::Allocation>,
    },

    #[error("user {user} is associated only with cells that never give it a positive rate")]
    InfeasibleAssociation { user: usize },

    #[error("rates cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
