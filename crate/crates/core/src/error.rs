use std::error::Error as StdError;
use std::fmt;

/// Errors produced by model construction, validation, and the numerical kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A parameter is outside its admissible range (negative step, bad quantile, ...).
    InvalidParameter(String),
    /// Matrix or vector dimensions do not agree.
    Dimension(String),
    /// An observation cannot be produced by any state (lies outside the model range).
    Infeasible { step: usize, message: String },
    /// The constraint matrix lacks full row rank; `step` is the first time index
    /// at which a Cholesky pivot collapsed.
    RankDeficient { step: usize, message: String },
    /// A reference oracle refused the problem (size guard, singular innovation, ...).
    Oracle(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidParameter(msg) => write!(f, "invalid parameter: {msg}"),
            Error::Dimension(msg) => write!(f, "dimension mismatch: {msg}"),
            Error::Infeasible { step, message } => {
                write!(f, "infeasible model at step {step}: {message}")
            }
            Error::RankDeficient { step, message } => {
                write!(f, "rank-deficient constraints at step {step}: {message}")
            }
            Error::Oracle(msg) => write!(f, "oracle error: {msg}"),
        }
    }
}

impl StdError for Error {}

pub type Result<T> = std::result::Result<T, Error>;
