use thiserror::Error;

/// Errors raised by field construction, geometric operators and the flow driver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("rank mismatch: {0}")]
    RankMismatch(String),

    #[error("non-finite value in {what} at node {node:?}")]
    NonFinite { what: &'static str, node: Vec<usize> },

    #[error("metric is singular or not positive definite at node {node:?}")]
    SingularMetric { node: Vec<usize> },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("jet order exhausted: {0}")]
    OrderExhausted(String),

    #[error("diffeomorphism Jacobian degenerates at node {node:?} (det = {det:e})")]
    DegenerateJacobian { node: Vec<usize>, det: f64 },

    #[error("flow halted at t = {t}: {reason}")]
    Halted { t: f64, reason: String },

    #[error("snapshot format: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
