use thiserror::Error;

/// Domain errors surfaced by the library. Usage errors belong to the CLI.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid float encoding: {0}")]
    Encoding(String),
    #[error("profile error: {0}")]
    Profile(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("model structure error: {0}")]
    Structure(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("undefined correlation: {0}")]
    Correlation(String),
    #[error("inconsistent oracle: {0}")]
    Inconsistent(String),
    #[error("attack precondition failed: {0}")]
    Precondition(String),
    #[error("I/O error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;
