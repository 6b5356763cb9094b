use thiserror::Error;

/// Errors raised across the laboratory.
///
/// Variants follow the failure classes of the experiment contracts: bad
/// configuration, out-of-domain arguments, off-grid queries, mismatched
/// noise realizations, unsupported requests and budget overruns.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("off-grid query: {0}")]
    Precision(String),

    #[error("coupling error: {0}")]
    Coupling(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("budget exceeded: {0}")]
    Resource(String),

    #[error("insufficient samples: {0}")]
    Insufficient(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
