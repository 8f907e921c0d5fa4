use thiserror::Error;

/// Errors raised by the numerical library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("singular normalization in {op}: {detail}")]
    Singularity { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("internal consistency check failed in {op}: discrepancy {discrepancy:e} exceeds {tolerance:e}")]
    InternalConsistency {
        op: &'static str,
        discrepancy: f64,
        tolerance: f64,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite loss at restart {restart}, step {step}: {value}")]
    NonFinite {
        restart: usize,
        step: usize,
        value: f64,
    },

    #[error("serialization: {0}")]
    Serialization(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
