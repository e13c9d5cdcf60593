use std::fmt;
use std::path::Path;

use sparsedit_core::Error;

/// Failure reported as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub field: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            field: None,
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            kind: "config",
            field: Some(field.into()),
            message: reason.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        let kind = if e.kind() == std::io::ErrorKind::NotFound { "missing_file" } else { "io" };
        Self {
            kind,
            field: Some(path.display().to_string()),
            message: e.to_string(),
        }
    }

    pub fn from_toml(e: toml::de::Error) -> Self {
        Self::new("config", e.message().to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            "usage" => 2,
            "config" => 3,
            "missing_file" => 4,
            _ => 1,
        }
    }

    /// Single-line JSON object `{"error":kind,"field":..,"message":..}`.
    pub fn to_line(&self) -> String {
        let v = serde_json::json!({
            "error": self.kind,
            "field": self.field,
            "message": self.message.replace('\n', " "),
        });
        v.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.field {
            Some(field) => write!(f, "{}: {field}: {}", self.kind, self.message),
            None => write!(f, "{}: {}", self.kind, self.message),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { field, reason } => Self::config(field, reason),
            Error::CheckpointEntry { entry, reason } => Self {
                kind: "checkpoint",
                field: Some(entry),
                message: reason,
            },
            Error::Checkpoint(m) => Self::new("checkpoint", m),
            Error::Import(m) => Self::new("import", m),
            Error::Schedule(m) => Self {
                kind: "config",
                field: Some("schedule".into()),
                message: m,
            },
            Error::NonFiniteLoss { .. } => Self::new("non_finite_loss", e.to_string()),
            Error::Io(io) => Self::new("io", io.to_string()),
            other => Self::new("runtime", other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}
