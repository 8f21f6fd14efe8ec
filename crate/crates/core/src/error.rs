//! Error taxonomy shared by the library and mapped to process exit codes by
//! the CLI: configuration, data, and numerical failures are distinct classes.

/// Broad class of a failure, used by callers to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration: unknown columns, invalid option values.
    Config,
    /// Bad or insufficient data: malformed rows, separation, too few levels.
    Data,
    /// Numerical failure: divergent inner solves, non-convergence.
    Numerical,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Io(_) => ErrorKind::Config,
            Error::Data(_) | Error::Csv(_) | Error::Json(_) => ErrorKind::Data,
            Error::Numerical(_) => ErrorKind::Numerical,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
