use thiserror::Error;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A value lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration value is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An API was called in a way its contract does not allow.
    #[error("usage error: {0}")]
    Usage(String),
    /// Scene generation could not satisfy its constraints.
    #[error("scene generation failed: {0}")]
    Generation(String),
    /// A file was written by an incompatible schema version.
    #[error("incompatible {what} version: found {found}, expected {expected}")]
    Incompatible {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    /// A binary or text file could not be parsed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    /// Training produced a non-finite value.
    #[error("numerical abort at step {step}: loss term `{term}` is not finite")]
    NumericalAbort { step: usize, term: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command line front end: 3 for numerical
    /// aborts, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalAbort { .. } => 3,
            _ => 2,
        }
    }
}
