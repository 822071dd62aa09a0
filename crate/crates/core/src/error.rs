use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix has a non-finite entry")]
    NonFinite,

    #[error("matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e}, floor {floor:e})")]
    NotPositiveDefinite { min_eigenvalue: f64, floor: f64 },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("unsupported matrix dimension {0} (expected 1..=6)")]
    UnsupportedDimension(usize),

    #[error("{name} = {value} is out of range ({expected})")]
    OutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("ensemble is empty")]
    EmptyEnsemble,

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("quadrature failed to reach tolerance (error estimate {estimate:e})")]
    Quadrature { estimate: f64 },

    #[error("voxel {index} at ({x}, {y}, {z}) is not positive definite")]
    NonSpdVoxel {
        index: usize,
        x: usize,
        y: usize,
        z: usize,
    },

    #[error("ill-conditioned matrix: condition number {0:e}")]
    IllConditioned(f64),

    #[error("eigenvalue multiplicities fall outside the supported cases")]
    UnsupportedSpectrum,

    #[error("eigenvalue gap {gap:e} is below the guard {guard:e}")]
    NearDegenerate { gap: f64, guard: f64 },

    #[error("{failed} of {total} voxel fits did not converge (limit {limit})")]
    FitFailures { failed: usize, total: usize, limit: f64 },

    #[error("{0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
