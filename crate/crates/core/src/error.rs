use thiserror::Error;

/// Failures raised while talking to a black-box oracle.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("oracle unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("oracle protocol error: {0}")]
    Protocol(String),
    #[error("oracle rejected request: {0}")]
    Rejected(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("no evaluations have been recorded")]
    NoEvaluations,
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("verbalizer error: {0}")]
    Verbalizer(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        })
    }
}
