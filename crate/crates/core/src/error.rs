use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate weights: all log ratios are -inf")]
    DegenerateWeights,

    #[error("degenerate tail: all tail values are equal")]
    DegenerateTail,

    #[error("insufficient tail: need at least 5 values, got {0}")]
    InsufficientTail(usize),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("evaluation error: non-finite density (NaN) at draw {index}")]
    Evaluation { index: usize },

    #[error("bridge sampling did not converge after {iterations} iterations (last log estimate {last})")]
    Convergence { iterations: usize, last: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("sampler initialization failed: {0}")]
    Initialization(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("imputation error: {0}")]
    Imputation(String),

    #[error("selection error: {0}")]
    Selection(String),

    /// Propagation stopped early; `partial` holds the targets resolved so far.
    #[error("orchestration error: {message}")]
    Orchestration {
        target: Option<usize>,
        message: String,
        partial: Option<Box<crate::orchestrator::PropagationReport>>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
