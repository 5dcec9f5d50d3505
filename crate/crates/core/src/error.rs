use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("construction error: {0}")]
    Construction(String),

    #[error("eigensolver failed on {dimension}x{dimension} matrix (frobenius norm {norm:.6e}, max asymmetry {asymmetry:.3e}): {reason}")]
    Eigensolver {
        dimension: usize,
        norm: f64,
        asymmetry: f64,
        reason: String,
    },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("memory estimate {required_gb:.2} GB exceeds budget {budget_gb:.2} GB")]
    BudgetExceeded { required_gb: f64, budget_gb: f64 },

    #[error("cache error: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
