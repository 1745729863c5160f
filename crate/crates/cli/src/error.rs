use std::fmt;

/// Command failure, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Missing or malformed input data (exit 3).
    Data(String),
    /// Checkpoint or dataset does not fit the configuration (exit 4).
    Incompatible(String),
    /// Anything else (exit 1).
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Incompatible(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Incompatible(m) => write!(f, "incompatible: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<unibev_core::Error> for CliError {
    fn from(e: unibev_core::Error) -> Self {
        use unibev_core::Error as E;
        match e {
            E::Config(_) => CliError::Usage(e.to_string()),
            E::InvalidInput(_) | E::Parse { .. } | E::Io { .. } | E::Json(_) => CliError::Data(e.to_string()),
            E::Incompatible(_) => CliError::Incompatible(e.to_string()),
            E::Contract(_) => CliError::Internal(e.to_string()),
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
