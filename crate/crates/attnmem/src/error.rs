//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failure modes of the numerical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A caller-supplied argument is outside the documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// An iterative solver hit its iteration budget.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// A linear system was singular or too ill-conditioned to solve.
    #[error("solver breakdown: {context} (condition estimate {condition:e})")]
    SolverBreakdown { context: String, condition: f64 },
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
