use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("operator is not hermitian: asymmetry {asymmetry:.3e} exceeds tolerance {tol:.3e}")]
    NonHermitian { asymmetry: f64, tol: f64 },

    #[error("matrix function is not finite at eigenvalue {eigenvalue}")]
    NonFinite { eigenvalue: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("spectrum of {name} leaves [0,1]: eigenvalue {eigenvalue}")]
    NotCovariance { name: String, eigenvalue: f64 },

    #[error("{name} has an eigenvalue within {margin:e} of 0 or 1 ({eigenvalue})")]
    Boundary {
        name: String,
        eigenvalue: f64,
        margin: f64,
    },

    /// A theorem hypothesis needed for convergence is violated.
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("degenerate gap eigenvalue {0}: the bound-state construction assumes simple eigenvalues")]
    DegenerateGap(f64),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("inconsistent result: {0}")]
    Inconsistent(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
