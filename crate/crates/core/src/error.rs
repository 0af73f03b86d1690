use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coefficient matrix is not symmetric at {point:?} (deviation {deviation:e})")]
    Asymmetric { point: Vec<f64>, deviation: f64 },

    #[error("graph violates Lipschitz bound {m}: slope {slope} between {x:?} and {y:?}")]
    NotLipschitz { x: Vec<f64>, y: Vec<f64>, slope: f64, m: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("incompatible boundary data: {0}")]
    IncompatibleData(String),

    #[error("region outside the computational domain: {0}")]
    OutsideDomain(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("measure {value:e} is below the noise floor {floor:e}")]
    BelowNoiseFloor { value: f64, floor: f64 },

    #[error("resolution {got} too coarse, need at least {required}")]
    InsufficientResolution { required: usize, got: usize },

    #[error("expression parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
