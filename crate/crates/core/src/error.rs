use thiserror::Error;

/// Errors raised by the inversion library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid {what}: {reason}")]
    InvalidInput { what: &'static str, reason: String },

    #[error("non-positive expected count {value} at row {row}, column {col}")]
    NonPositiveRate { row: usize, col: usize, value: f64 },

    #[error("infeasible constraint set: {0}")]
    Infeasible(String),

    #[error("every pixel is invalid")]
    AllInvalid,

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidInput {
            what,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
