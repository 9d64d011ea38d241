use thiserror::Error;

/// Errors raised across the simulation and estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid generator: {0}")]
    InvalidGenerator(String),

    /// `1 + q_ii * step` would be negative for the named state (1-based).
    #[error("step {step} too large for state {state}: 1 + q_ii*step = {value} < 0 (need step < {limit})")]
    StepSize {
        state: usize,
        step: f64,
        value: f64,
        limit: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("impossible transition has positive weight at j={j}, i={i}, k={k}")]
    ImpossibleTransition { j: usize, i: usize, k: usize },

    #[error("numerical failure in {stage} at index {index}: {detail}")]
    Numerical {
        stage: &'static str,
        index: usize,
        detail: String,
    },

    #[error("iteration {iteration} failed: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
