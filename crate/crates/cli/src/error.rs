use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Schema violations and invalid parameter values; exit status 2.
    #[error("{message}")]
    Config {
        message: String,
        key: Option<String>,
    },
    /// Failures while running a valid experiment; exit status 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn config(message: impl Into<String>, key: Option<&str>) -> Self {
        CliError::Config {
            message: message.into(),
            key: key.map(str::to_string),
        }
    }

    /// Library errors caused by the supplied parameters are config errors.
    pub fn from_input(e: kollektiv::Error) -> Self {
        use kollektiv::Error as E;
        match e {
            E::CheckpointNotFound(_) | E::IntegrationFailure { .. } => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::config(e.to_string(), None),
        }
    }

    pub fn io(context: &str, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{context}: {e}"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            CliError::Config { message, key } => {
                let mut err = json!({"kind": "config", "message": message});
                if let Some(k) = key {
                    err["key"] = Value::String(k.clone());
                }
                json!({ "error": err })
            }
            CliError::Runtime(message) => json!({"error": {"kind": "runtime", "message": message}}),
        }
    }
}

impl From<kollektiv::Error> for CliError {
    fn from(e: kollektiv::Error) -> Self {
        CliError::from_input(e)
    }
}
