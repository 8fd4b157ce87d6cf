use std::path::PathBuf;

use serde_json::json;
use thiserror::Error;

/// Exit code 1 for validation failures, 2 for runtime failures.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config field `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("`{field}` = {value} must be {requirement}")]
    Range {
        field: String,
        value: f64,
        requirement: String,
    },
    #[error("missing config section `{0}`")]
    MissingSection(&'static str),
    #[error("missing input `inputs.{0}`")]
    MissingInput(&'static str),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Runtime(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Schema { .. } => "schema",
            CliError::Range { .. } => "range",
            CliError::MissingSection(_) => "missing_section",
            CliError::MissingInput(_) => "missing_input",
            CliError::Input { .. } => "input",
            CliError::Io { .. } => "io",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// Machine-readable form written to stderr on failure.
    pub fn to_json(&self) -> serde_json::Value {
        let field = match self {
            CliError::Schema { path, .. } => Some(path.clone()),
            CliError::Range { field, .. } => Some(field.clone()),
            CliError::MissingSection(s) => Some((*s).to_string()),
            CliError::MissingInput(s) => Some(format!("inputs.{s}")),
            _ => None,
        };
        json!({
            "error": {
                "kind": self.kind(),
                "exit_code": self.exit_code(),
                "field": field,
                "message": self.to_string(),
            }
        })
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}
