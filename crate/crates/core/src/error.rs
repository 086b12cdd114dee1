use thiserror::Error;

use crate::autodiff::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("degenerate target: sum of squares {sum_sq:e} <= 1e-12")]
    DegenerateTarget { sum_sq: f64 },
    #[error("degenerate domain {domain}: difficulty {difficulty:e}")]
    DegenerateDomain { domain: String, difficulty: f64 },
    #[error("tipping point undefined when lambda_be = 0")]
    UndefinedTippingPoint,
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{} unparseable row(s); first: line {}: {}", .0.len(), .0[0].line, .0[0].message)]
    Parse(Vec<RowError>),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("invalid SCM spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("singular covariance; collinear or constant columns: {columns:?}")]
    Singular { columns: Vec<String> },
    #[error("Markov blanket of {target} is empty; refusing to train on zero features")]
    EmptyBlanket { target: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

/// One rejected input row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Toml(_) | Error::UndefinedTippingPoint => ErrorKind::Config,
            Error::UnknownDomain(_)
            | Error::UnknownVariable(_)
            | Error::Schema(_)
            | Error::Parse(_)
            | Error::Integrity(_)
            | Error::InvalidSpec(_)
            | Error::EmptyBlanket { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::DegenerateTarget { .. }
            | Error::DegenerateDomain { .. } => ErrorKind::Data,
            Error::Tensor(_)
            | Error::NonFiniteGradient { .. }
            | Error::Singular { .. }
            | Error::Numerical(_) => ErrorKind::Numerical,
            Error::Io(_) => ErrorKind::Io,
        }
    }
}
