use std::fmt;
use std::path::Path;

use tcm_core::TcmError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// A verification suite failed, or a run failed at runtime.
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const MISSING: i32 = 3;
    pub const MISMATCH: i32 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(key: &str, reason: impl fmt::Display) -> Self {
        Self::new(
            exit::CONFIG,
            format!("invalid config key `{key}`: {reason}"),
        )
    }

    pub fn missing(path: &Path, remedy: &str) -> Self {
        Self::new(
            exit::MISSING,
            format!("missing {}; {remedy}", path.display()),
        )
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self::new(exit::MISMATCH, message)
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self::new(exit::FAILURE, message)
    }

    /// Prefixes the message, keeping the code.
    pub fn context(self, prefix: impl fmt::Display) -> Self {
        Self::new(self.code, format!("{prefix}: {}", self.message))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<TcmError> for CliError {
    fn from(e: TcmError) -> Self {
        let code = match &e {
            TcmError::Config { .. } => exit::CONFIG,
            TcmError::Shape { .. } => exit::MISMATCH,
            _ => exit::FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(format!("i/o error: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::failure(format!("csv error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::failure(format!("json error: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
