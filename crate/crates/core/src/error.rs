use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("horizon overflow: t_end {t_end} + delta {delta} exceeds horizon T = {horizon}")]
    HorizonOverflow { horizon: f64, t_end: f64, delta: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("time mismatch in {context}: {left} vs {right}")]
    TimeMismatch { context: &'static str, left: f64, right: f64 },

    #[error("control value {value:?} lies outside the control set")]
    OutsideControlSet { value: Vec<f64> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context} at step {step}, path {path}")]
    NonFinite { context: &'static str, step: usize, path: usize },

    #[error("budget exceeded: {what} needs {required}, budget is {budget}; {hint}")]
    BudgetExceeded {
        what: &'static str,
        required: f64,
        budget: f64,
        hint: &'static str,
    },

    #[error("implicit driver step is not a contraction: L*dt = {factor} >= 1; use a smaller time step")]
    NonContraction { factor: f64 },

    #[error("fixed-point solve did not converge after {iterations} iterations (residual {residual})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("sampler exhausted after {attempts} attempts; try a larger mu or mu0")]
    SamplerExhausted { attempts: usize },

    #[error("derivative estimation failed at time index {index}: {reason}")]
    Derivative { index: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(context: &'static str, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { context, expected, found }
    }
}
