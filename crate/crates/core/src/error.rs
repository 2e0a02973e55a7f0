use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("barrier domain violated: delta_q {delta_q} >= budget {epsilon}")]
    BarrierDomain { delta_q: f64, epsilon: f64 },

    #[error("baseline policy unsafe (constraint {constraint:?}): budget {epsilon} <= 0")]
    UnsafeBaseline { constraint: Option<usize>, epsilon: f64 },

    #[error("exploration noise std must be positive")]
    DegenerateNoise,

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("non-positive curvature {0} along the search direction")]
    Curvature(f64),

    #[error("Q-function training diverged (loss {0})")]
    TrainingDivergence(f64),

    #[error("no safe initial policy after {iterations} iterations (measured cost {measured}, threshold {threshold})")]
    InitializationFailure {
        iterations: usize,
        measured: f64,
        threshold: f64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains non-finite values")))
    }
}
