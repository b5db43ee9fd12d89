use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum BipError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in environment {env} at row {row}, column {column}")]
    NonFiniteValue {
        env: i64,
        row: usize,
        column: String,
    },

    #[error("environment {0} has no rows")]
    EmptyEnvironment(i64),

    #[error("dataset has no environments")]
    NoEnvironments,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("prior support has {size} candidates, above the enumeration cap of {cap}")]
    SupportTooLarge { size: String, cap: u128 },

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("analytic KL gradient requires a uniform prior over all selectors")]
    PriorNotUniform,

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize, last_good_phi: Vec<f64> },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("unknown example {0}; expected 1, 2 or 3")]
    UnknownExample(u32),

    #[error("singular covariance for environment {0}")]
    SingularCovariance(usize),

    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),

    #[error("true selector is outside the posterior support")]
    TruthOutsideSupport,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BipError>;
