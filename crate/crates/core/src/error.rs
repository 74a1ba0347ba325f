use thiserror::Error;

/// Errors raised by model construction, fitting and variance estimation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("covariate matrix is rank deficient (smallest/largest singular value ratio {ratio:.3e})")]
    RankDeficient { ratio: f64 },

    #[error("numeric overflow at ({row}, {col}): exponent {exponent:.6e} exceeds the representable range")]
    NumericOverflow { row: usize, col: usize, exponent: f64 },

    #[error("parameter outside its domain: {0}")]
    ParameterDomain(String),

    #[error("profiling of row {row} did not converge (final gradient norm {grad_norm:.3e})")]
    ProfilingFailure { row: usize, grad_norm: f64 },

    #[error("could not repair covariance to SPD (jitter reached {jitter:.1e})")]
    SpdRepair { jitter: f64 },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("sampling failure at ({row}, {col}): Poisson rate {rate:.6e} exceeds the supported bound")]
    Sampling { row: usize, col: usize, rate: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, PlnError>;
