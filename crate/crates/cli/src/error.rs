use std::fmt;

use serde_json::json;

#[derive(Debug)]
pub enum CliError {
    Core(boxseg::Error),
    Usage { field: &'static str, message: String },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(field: &'static str, message: impl Into<String>) -> Self {
        CliError::Usage { field, message: message.into() }
    }

    /// The JSON object printed on stderr before a nonzero exit.
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Core(e) => json!({
                "error": {
                    "kind": e.kind(),
                    "field": e.field(),
                    "path": e.path().map(|p| p.display().to_string()),
                    "message": e.to_string(),
                }
            }),
            CliError::Usage { field, message } => json!({
                "error": { "kind": "usage", "field": field, "path": null, "message": message }
            }),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage { field, message } => write!(f, "{field}: {message}"),
        }
    }
}

impl From<boxseg::Error> for CliError {
    fn from(e: boxseg::Error) -> Self {
        CliError::Core(e)
    }
}
