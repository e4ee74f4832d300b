use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {}", fields.join("; "))]
    Config { fields: Vec<String> },

    #[error("{0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] drivelang::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config-error",
            CliError::Usage(_) => "usage-error",
            CliError::Io { .. } => "io-error",
            CliError::Core(e) => e.kind(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One-line JSON error record written to stderr.
    pub fn record(&self, command: &str) -> String {
        let mut v = json!({
            "status": "error",
            "command": command,
            "kind": self.kind(),
            "message": self.to_string(),
        });
        if let CliError::Config { fields } = self {
            v["fields"] = json!(fields);
        }
        v.to_string()
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
