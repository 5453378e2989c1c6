use thiserror::Error;

/// Errors raised by the simulators, oracles and experiment harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("covariance is not positive semidefinite (eigenvalue {eigenvalue:e})")]
    NotPositiveSemidefinite { eigenvalue: f64 },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },

    #[error("delay {delay} at step {step} reads grid index {index}, outside the stored history")]
    DelayOutOfRange { step: usize, delay: usize, index: i64 },

    #[error("{method} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("characteristic root exponent V = {v} is not negative")]
    UnstableRoot { v: f64 },

    #[error("replication {replication} failed: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{} of {total} replications failed; first: {}", failures.len(), failures[0])]
    Replications { total: usize, failures: Vec<Error> },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures caused by the numerics rather than by the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. }
            | Error::NoConvergence { .. }
            | Error::NotPositiveSemidefinite { .. } => true,
            Error::Replication { source, .. } => source.is_numerical(),
            Error::Replications { failures, .. } => failures.iter().any(Error::is_numerical),
            _ => false,
        }
    }
}
