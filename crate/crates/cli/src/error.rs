use std::fmt;

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn mismatch(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_MISMATCH,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }
}

impl CliError {
    /// Prefixes the message with the artifact it concerns.
    pub fn at(mut self, path: &std::path::Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Diagnostics are a single line.
        f.write_str(&self.message.replace('\n', " "))
    }
}

impl std::error::Error for CliError {}

impl From<agrp::Error> for CliError {
    fn from(e: agrp::Error) -> Self {
        use agrp::Error as E;
        let code = match &e {
            E::Divergence { .. } | E::Evaluation(_) | E::DivisionByZero(_) => EXIT_NUMERIC,
            E::Format { .. } | E::Malformed(_) | E::Consistency(_) | E::State(_) | E::Dimension { .. } => {
                EXIT_MISMATCH
            }
            E::Config(_) | E::Domain(_) | E::Generation(_) | E::Capability(_) | E::Io(_) | E::Json(_) => {
                EXIT_CONFIG
            }
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::config(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::config(format!("config: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
