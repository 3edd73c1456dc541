use std::fmt;

use serde::Serialize;

/// Failure of a command, classified by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Bad or inconsistent configuration, unreadable inputs. Exit 2.
    Config(String),
    /// Non-finite values in inputs or intermediate results. Exit 3.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Numeric(_) => "numeric",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numeric(m) => m,
        }
    }

    /// One-line JSON document for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: &'a str,
            message: &'a str,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            error: Body<'a>,
            exit_code: i32,
        }
        serde_json::to_string(&Doc {
            error: Body {
                kind: self.kind(),
                message: self.message(),
            },
            exit_code: self.exit_code(),
        })
        .expect("error document serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind(), self.message())
    }
}

impl std::error::Error for CliError {}

impl From<blockquant::Error> for CliError {
    fn from(e: blockquant::Error) -> Self {
        match e {
            blockquant::Error::InvalidInput(_) => CliError::Numeric(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}
