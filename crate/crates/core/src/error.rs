use std::path::PathBuf;

use thiserror::Error;

use crate::device_model::ClientId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{file}:{line}:{column}: {message}")]
    Parse {
        file: String,
        line: u64,
        column: usize,
        message: String,
    },

    #[error("{file}: table has no data rows")]
    EmptyTable { file: String },

    #[error("knee detection needs at least 3 points, got {0}")]
    TooFewPoints(usize),

    #[error("client {client} failed: {message}")]
    ClientFailed { client: ClientId, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Machine-readable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::TooFewPoints(_) => "config",
            Error::Parse { .. } | Error::EmptyTable { .. } | Error::Json(_) => "input",
            Error::ClientFailed { .. } => "round",
            Error::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "input" => 3,
            "round" => 4,
            _ => 5,
        }
    }
}
