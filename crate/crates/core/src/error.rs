use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input (bad box, mismatched dimensions, out-of-range settings).
    #[error("domain error: {0}")]
    Domain(String),

    /// Emulator fitting failed (rank-deficient regressors, singular design, optimizer failure).
    #[error("fit error: {0}")]
    Fit(String),

    /// A matrix that should be positive definite could not be factored.
    #[error("factorization error: {0}")]
    Factorization(String),

    /// A quantity that must be nonnegative or finite drifted beyond tolerance.
    #[error("numerical health: {0}")]
    NumericalHealth(String),

    #[error("ODE solver failed at t = {t}: {reason}")]
    Solver { t: f64, reason: String },

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    /// SAEM produced a non-finite parameter at the given iteration.
    #[error("SAEM diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("study failed: {0}")]
    Study(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
