use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("duplicate dates: {0}")]
    DuplicateDates(String),

    #[error("empty panel")]
    EmptyPanel,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("return constraint is degenerate on the active block (expected returns are all equal)")]
    DegenerateReturnConstraint,

    #[error("infeasible: minimum return {r0} exceeds the largest expected return {max_mu}")]
    Infeasible { r0: f64, max_mu: f64 },

    #[error("zero variance")]
    ZeroVariance,

    #[error("solver failed: {0}")]
    SolverFailed(String),
}

impl Error {
    /// Short tag naming the subsystem an error originates from.
    pub fn origin(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) => "io",
            Error::Malformed(_) | Error::DuplicateDates(_) | Error::EmptyPanel => "market_data",
            Error::InvalidArgument(_) | Error::DimensionMismatch(_) => "input",
            Error::NotSymmetric(_) | Error::Singular(_) => "linalg",
            Error::DegenerateReturnConstraint
            | Error::Infeasible { .. }
            | Error::SolverFailed(_) => "optimizer",
            Error::ZeroVariance => "metrics",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
