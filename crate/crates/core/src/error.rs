use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RadError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Every discretized weight is zero, e.g. all levels fall below a CVaR cutoff.
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error(
        "sinkhorn did not converge after {iterations} iterations (marginal residual {residual:e})"
    )]
    Convergence { iterations: usize, residual: f64 },

    #[error("parse error: {0}")]
    Parse(String),
}

impl RadError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        RadError::InvalidArgument(msg.into())
    }

    /// True for errors caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            RadError::Convergence { .. } | RadError::DegenerateSpectrum(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, RadError>;
