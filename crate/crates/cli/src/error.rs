use std::fmt;

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration.
    Usage(String),
    /// The computation itself failed.
    Compute(metasaem::Error),
    Io(std::io::Error),
}

impl CliError {
    pub fn config(path: &str, msg: &str) -> Self {
        CliError::Usage(format!("config error at `{path}`: {msg}"))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Compute(metasaem::Error::Diverged { .. }) => 3,
            CliError::Compute(_) | CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Compute(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<metasaem::Error> for CliError {
    fn from(e: metasaem::Error) -> Self {
        CliError::Compute(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}
