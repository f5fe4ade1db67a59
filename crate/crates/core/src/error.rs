use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two sequences that must line up do not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    /// A numeric input was NaN, infinite, or otherwise out of its domain.
    #[error("invalid value: {0}")]
    InvalidValue(String),
    /// A rollout group violates its invariants.
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A token or bucket index outside the table.
    #[error("index {index} out of range (limit {limit}) for {what}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("config error: {0}")]
    Config(String),
    /// Training produced a non-finite gradient; carries a dump of the offending rollout.
    #[error("non-finite gradient: {0}")]
    NonFinite(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
