use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] nar_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable machine-readable category for the one-line error report.
    pub fn category(&self) -> &'static str {
        use nar_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Io { .. } | CliError::Core(E::Io { .. }) => "io",
            CliError::Input(_) | CliError::Core(E::Input(_)) | CliError::Core(E::EmptyOutput) => "input",
            CliError::Core(E::Format(_)) => "format",
            CliError::Core(E::NonFiniteLoss { .. }) => "numeric",
            CliError::Core(E::Tensor(_)) => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "checkpoint" | "format" => 3,
            "io" => 4,
            "input" => 5,
            "numeric" => 6,
            _ => 70,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
