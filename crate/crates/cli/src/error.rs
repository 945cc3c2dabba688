use std::fmt;
use std::path::Path;

use quase_core::Error;

/// One-line, machine-parsable failure: `error<TAB>code<TAB>message`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }

    pub fn schema(path: &Path, message: impl fmt::Display) -> Self {
        Self::new("config-schema", format!("{}: {message}", path.display()))
    }

    pub fn missing(path: &Path, err: std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            Self::new("missing-input", format!("{} does not exist", path.display()))
        } else {
            Self::new("io", format!("{}: {err}", path.display()))
        }
    }

    pub fn mismatch(path: &Path, expected: &str, found: Option<&str>) -> Self {
        Self::new(
            "upstream-mismatch",
            format!(
                "{} was produced by config {} but the current config expects {expected}; rerun the upstream stage",
                path.display(),
                found.unwrap_or("<none>")
            ),
        )
    }

    pub fn line(&self) -> String {
        let flat: String = self.message.chars().map(|c| if c == '\n' || c == '\t' { ' ' } else { c }).collect();
        format!("error\t{}\t{flat}", self.code)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => "missing-input",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::CheckpointVersion { .. } => "checkpoint-version",
            Error::Config(_) | Error::EmptyGrid => "config",
            Error::Grammar(_) => "grammar",
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => "non-finite",
            _ => "invalid-input",
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
