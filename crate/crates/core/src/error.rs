use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("basis degree {degree} is below the covariance CPD order {order}")]
    OrderMismatch { degree: usize, order: usize },

    #[error("singular Kriging system: {0}")]
    SingularSystem(String),

    #[error("point {index} duplicates an existing design point")]
    DuplicatePoint { index: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("predictive variance is zero at the requested point")]
    DegenerateVariance,

    #[error("no candidate left to evaluate")]
    ExhaustedCandidates,

    #[error("evaluator returned non-finite value {value} at sample {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("covariance factorization failed: {0}; try a larger jitter")]
    Factorization(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::OrderMismatch { .. } => "order_mismatch",
            Error::SingularSystem(_) => "singular_system",
            Error::DuplicatePoint { .. } => "duplicate_point",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::DegenerateVariance => "degenerate_variance",
            Error::ExhaustedCandidates => "exhausted_candidates",
            Error::NonFinite { .. } => "non_finite",
            Error::Factorization(_) => "factorization",
            Error::Empty(_) => "empty",
            Error::Config { .. } => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
