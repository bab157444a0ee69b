use thiserror::Error;

/// Errors produced by the library. Each variant maps onto one CLI exit class.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FwnError {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Adaptive quadrature could not reach the requested tolerance.
    #[error("accuracy error: error estimate {estimate:.3e} exceeds tolerance {tol:.3e} (truncation tail estimate {tail:.3e})")]
    Accuracy { estimate: f64, tol: f64, tail: f64 },

    /// Grid shape or option mismatch.
    #[error("configuration error: {0}")]
    Config(String),

    /// Matrix factorization or spectral step failed.
    #[error("numeric error: {message} (smallest pivot/eigenvalue {value:.3e})")]
    Numeric { message: String, value: f64 },

    /// The caller passed an integrand of the wrong kind.
    #[error("contract error: {0}")]
    Contract(String),

    /// Picard iterates stopped contracting.
    #[error("picard iteration diverged (lipschitz D = {lipschitz}, horizon T = {horizon}): deltas {deltas:?}")]
    Divergence {
        lipschitz: f64,
        horizon: f64,
        deltas: Vec<f64>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for FwnError {
    fn from(e: std::io::Error) -> Self {
        FwnError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FwnError>;
