use thiserror::Error;

use crate::sysmodel::ExchangeabilityReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("matrix is not symmetric (max deviation {deviation:e})")]
    NotSymmetric { deviation: f64 },

    #[error("matrix is singular or numerically singular ({context})")]
    Singular { context: &'static str },

    #[error("closed loop is unstable: spectral radius {rho}")]
    Unstable { rho: f64 },

    #[error("Riccati iteration failed to converge after {iterations} iterations (pair not stabilizable?)")]
    NotStabilizable { iterations: usize },

    #[error("{matrix} must be {requirement} (minimum eigenvalue {min_eigenvalue:e})")]
    Assumption {
        matrix: String,
        requirement: &'static str,
        min_eigenvalue: f64,
    },

    #[error("system is not partially exchangeable: {}", .0.summary())]
    NotExchangeable(Box<ExchangeabilityReport>),

    #[error("coordinate bundle inconsistent: {what} (deviation {deviation:e})")]
    Consistency { what: String, deviation: f64 },

    #[error("decomposition integrity violated: {what} (relative deviation {deviation:e})")]
    Integrity { what: String, deviation: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical inconsistency: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
