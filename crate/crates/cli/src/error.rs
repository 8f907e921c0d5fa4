use thiserror::Error;

/// Process exit codes.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_ASSERTION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("cannot write {path}: {source}")]
    Output {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] doran_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Configuration and environment problems are usage errors; anything the
    /// computation itself raised counts as a failed run.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Output { .. } => EXIT_USAGE,
            CliError::Core(doran_core::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(_) => EXIT_ASSERTION,
        }
    }
}
