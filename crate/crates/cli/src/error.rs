//! CLI error taxonomy mapped to process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, unusable inputs or missing stage dependencies.
    #[error("configuration error: {0}")]
    Config(String),

    /// A solver failed to converge.
    #[error("solver divergence: {0}")]
    Divergence(String),

    /// Filesystem or serialization failure.
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Divergence(_) => "divergence",
            CliError::Io(_) => "io",
        }
    }
}

impl From<homogcl_core::Error> for CliError {
    fn from(e: homogcl_core::Error) -> Self {
        match e {
            homogcl_core::Error::Diverged { .. } | homogcl_core::Error::LinearSolve { .. } => {
                CliError::Divergence(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
