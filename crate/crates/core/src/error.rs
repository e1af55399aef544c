use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cannot parse quantization scheme {input:?}: {reason}")]
    SchemeParse { input: String, reason: String },

    #[error("closed form unavailable: {0}")]
    ClosedFormUnavailable(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("SGD diverged at step {step} (|v| = {norm:e})")]
    Diverged { step: usize, norm: f64 },

    #[error("outside the regime of validity: {0}")]
    OutOfRegime(String),

    #[error("fit rejected: {0}")]
    Fit(String),
}
