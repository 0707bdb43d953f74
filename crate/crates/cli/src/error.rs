use std::path::Path;

use disco_core::Error as CoreError;
use disco_gateway::GatewayError;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or flags.
    #[error("{0}")]
    Usage(String),
    /// Inputs that could not be read, parsed or validated.
    #[error("{0}")]
    Data(String),
    /// Anything that went wrong after inputs were accepted.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Prefixes the message with the input it came from.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{what}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{what}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{what}: {m}")),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidParam { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Input paths must exist before anything runs.
pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist", path.display())))
    }
}

pub fn read_to_string(path: &Path) -> Result<String> {
    require_file(path)?;
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}
