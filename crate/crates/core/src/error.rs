use std::fmt;

/// Crate-wide error type. Every fallible public operation returns
/// [`Result`](crate::Result) with this error.
#[derive(Debug)]
pub enum Error {
    /// An operation was handed tensors whose shapes do not line up.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// A numeric argument is outside its documented range.
    InvalidValue {
        what: &'static str,
        value: f64,
    },
    /// A configuration failed validation before any work started.
    Config(String),
    /// A dataset file is malformed. `line` is 1-based within the file.
    Data {
        line: usize,
        message: String,
    },
    /// A computation produced a non-finite value where finiteness is part
    /// of the contract (e.g. a diverged training loss).
    NonFinite {
        context: String,
    },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got}")
            }
            Error::InvalidValue { what, value } => {
                write!(f, "invalid value for {what}: {value}")
            }
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Data { line, message } => write!(f, "dataset line {line}: {message}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl fmt::Debug, got: impl fmt::Debug) -> Self {
        Error::ShapeMismatch {
            op,
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
