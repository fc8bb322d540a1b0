use std::process::ExitCode;

use thiserror::Error;

/// Harness errors, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// invalid or inconsistent configuration or input files (exit 2)
    #[error("config error: {0}")]
    Config(String),
    /// a property check, training run or convergence requirement failed (exit 1)
    #[error("failure: {0}")]
    Failure(String),
    #[error(transparent)]
    Core(#[from] milodo::Error),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }

    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(milodo::Error::Parameter(_) | milodo::Error::Shape(_) | milodo::Error::Format(_)) => 2,
            _ => 1,
        }
    }
}
