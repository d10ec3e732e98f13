use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// A sufficient condition of a convergence bound does not hold.
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("linear system is singular (numerical rank {rank} of {dim})")]
    Singular { rank: usize, dim: usize },

    #[error("operator is not monotone: smallest symmetric eigenvalue {min_eigenvalue:e}")]
    NotMonotone { min_eigenvalue: f64 },

    #[error("fixed-point resolvent did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("non-finite state at step {step}")]
    Divergence { step: usize },

    #[error("traces do not share a recording grid: {0}")]
    GridMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension { expected, actual })
    }
}
