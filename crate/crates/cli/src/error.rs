use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing argument: {0}")]
    Missing(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Artifact {
        path: String,
        source: coda::Error,
    },

    #[error(transparent)]
    Core(#[from] coda::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Missing(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Artifact { .. } => "artifact",
            CliError::Core(_) => "core",
            CliError::Json(_) => "json",
        }
    }
}
