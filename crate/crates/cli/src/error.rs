use std::fmt;
use std::path::Path;

use seld_core::SeldError;

pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self { code: EXIT_VALIDATION, msg: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self { code: EXIT_IO, msg: msg.into() }
    }

    /// Attach the offending path, keeping the exit code of the cause.
    pub fn at(path: &Path, e: impl Into<CliError>) -> Self {
        let e = e.into();
        Self { code: e.code, msg: format!("{}: {}", path.display(), e.msg) }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<SeldError> for CliError {
    fn from(e: SeldError) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        Self { code, msg: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_VALIDATION };
        Self { code, msg: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;
