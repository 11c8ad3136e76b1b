use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] bridgekit::Error),
}

impl CliError {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Invalid { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// Attach a config field to a library error that stems from rejected input.
    pub fn at(field: &str) -> impl FnOnce(bridgekit::Error) -> CliError + '_ {
        move |e| {
            if e.is_numerical() {
                CliError::Core(e)
            } else {
                CliError::invalid(field, e.to_string())
            }
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_VALIDATION,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let (kind, field) = match self {
            CliError::Invalid { field, .. } => ("validation", Some(field.as_str())),
            CliError::Io { .. } => ("io", None),
            CliError::Core(e) if e.is_numerical() => ("numerical", None),
            CliError::Core(_) => ("validation", None),
        };
        let message = match self {
            CliError::Invalid { message, .. } => message.clone(),
            other => other.to_string(),
        };
        json!({
            "error": {
                "kind": kind,
                "field": field,
                "message": message,
                "exit_code": self.exit_code(),
            }
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;
