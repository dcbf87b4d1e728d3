use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Usage { message: String },
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] cftraj::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn input(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Input { path: path.into(), message: e.to_string() }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.into(), message: e.to_string() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage { message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage { .. } => "usage",
            CliError::Input { .. } => "input",
            CliError::Io { .. } => "io",
            CliError::Config(_) => "config",
            CliError::Core(_) => "failed",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// One-line JSON record for stderr.
    pub fn record(&self) -> String {
        let mut err = json!({ "kind": self.kind(), "message": self.to_string() });
        if let CliError::Input { path, .. } | CliError::Io { path, .. } = self {
            err["path"] = json!(path.display().to_string());
        }
        json!({ "version": 1, "error": err }).to_string()
    }
}

macro_rules! from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

from_core!(
    cftraj::DivergenceError,
    cftraj::GridError,
    cftraj::PipelineError,
    cftraj::PolicyError,
    cftraj::RenderError,
    cftraj::SelectionError,
    cftraj::StudyError,
    cftraj::SurrogateError,
    cftraj::TrainingError,
    cftraj::TrajectoryError
);
