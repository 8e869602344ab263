use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("knapsack instance exceeds solver limits: {0}")]
    Capacity(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::Io(io),
                _ => unreachable!(),
            },
            _ => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::Parse {
                    line,
                    msg: e.to_string(),
                }
            }
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            Error::Io(e.into())
        } else {
            Error::Parse {
                line: e.line() as u64,
                msg: e.to_string(),
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
