use std::path::Path;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Core(#[from] gas_core::Error),
    #[error("{0}")]
    Verify(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Serialize)]
struct Line<'a> {
    error: &'a str,
    message: String,
}

impl LabError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        LabError::Io { path: path.display().to_string(), message: err.to_string() }
    }

    pub fn format(path: &Path, message: impl ToString) -> Self {
        LabError::Format { path: path.display().to_string(), message: message.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Usage(_) => "usage",
            LabError::Config(_) => "config",
            LabError::Io { .. } => "io",
            LabError::Format { .. } => "format",
            LabError::Core(gas_core::Error::Config(_)) => "config",
            LabError::Core(gas_core::Error::Training(_)) => "training",
            LabError::Core(gas_core::Error::Dataset(_)) => "dataset",
            LabError::Core(_) => "contract",
            LabError::Verify(_) => "verify",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One-line JSON object `{"error": kind, "message": text}`.
    pub fn to_line(&self) -> String {
        let line = Line { error: self.kind(), message: self.to_string().replace('\n', " ") };
        serde_json::to_string(&line).expect("error line serializes")
    }
}
