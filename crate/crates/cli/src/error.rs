use std::fmt;
use std::path::Path;

use serde::Serialize;
use tileworld::pipeline::PipelineError;
use tileworld::worldspec::TileCoord;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    /// Bad flags or configuration values.
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const FORMAT: i32 = 4;
    pub const BUILD: i32 = 5;
    pub const CONFORMANCE: i32 = 6;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Config,
    Io,
    Format,
    Build,
    Conformance,
    Other,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => exit::USAGE,
            ErrorKind::Io => exit::IO,
            ErrorKind::Format => exit::FORMAT,
            ErrorKind::Build => exit::BUILD,
            ErrorKind::Conformance => exit::CONFORMANCE,
            ErrorKind::Other => exit::OTHER,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tile: Option<TileCoord>,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            tile: None,
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {e}", path.display()))
    }

    pub fn format(path: &Path, e: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Format, format!("{}: {e}", path.display()))
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let kind = match &e {
            PipelineError::Config(_) => ErrorKind::Config,
            PipelineError::Io(_) => ErrorKind::Io,
            PipelineError::Checkpoint(_) => ErrorKind::Format,
            _ => ErrorKind::Build,
        };
        Self {
            kind,
            message: e.to_string(),
            tile: e.tile(),
        }
    }
}
