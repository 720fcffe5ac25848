use std::fmt;
use std::path::PathBuf;

/// Command failure, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or arguments (exit 2).
    Config(String),
    /// A required input file does not exist (exit 3).
    Missing(PathBuf),
    /// An input file exists but cannot be decoded (exit 3).
    Artifact(String),
    /// Training, calibration or search failed numerically (exit 4).
    Numeric(String),
    /// Anything else, such as an unwritable output directory (exit 1).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) | CliError::Artifact(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Missing(p) => write!(f, "missing artifact: {}", p.display()),
            CliError::Artifact(m) => write!(f, "unreadable artifact: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<cellcode::Error> for CliError {
    fn from(e: cellcode::Error) -> Self {
        use cellcode::Error as E;
        match e {
            E::InvalidArgument(_) | E::Capacity { .. } => CliError::Config(e.to_string()),
            E::Format { .. } => CliError::Artifact(e.to_string()),
            E::Io(io) => CliError::Io(io.to_string()),
            E::Degenerate { .. } | E::Coverage(_) | E::Calibration(_) | E::Numeric(_) | E::EmptyDatabase => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
