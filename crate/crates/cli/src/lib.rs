//! Command implementations behind the `zoomnet` binary.
//!
//! Every command is a plain function so tests can drive the same code paths
//! the binary does. Output directories always receive a `manifest.json`.

pub mod commands;
pub mod manifest;
pub mod preset;

use std::fmt;

pub use commands::*;
pub use manifest::RunManifest;
pub use preset::Preset;

/// A failed command, rendered as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn line(&self) -> String {
        serde_json::json!({ "error": self.code, "message": self.message }).to_string()
    }

    /// Process exit status: 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.code {
            "unknown_key" | "config" | "usage" | "checkpoint" | "format" | "missing_file" => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<zoomnet_core::Error> for CliError {
    fn from(e: zoomnet_core::Error) -> Self {
        use zoomnet_core::Error as E;
        let code = match &e {
            E::UnknownKey(_) => "unknown_key",
            E::Config(_) => "config",
            E::Checkpoint(_) => "checkpoint",
            E::Format(_) | E::Json(_) => "format",
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => "missing_file",
            E::Io(_) => "io",
            E::NonFinite(_) => "non_finite",
            _ => "internal",
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        zoomnet_core::Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        zoomnet_core::Error::from(e).into()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
