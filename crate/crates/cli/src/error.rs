use thiserror::Error;

/// Failures with a stable process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{stage} failed: {msg}")]
    Numerical { stage: &'static str, msg: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numerical { .. } => 4,
        }
    }

    /// Attributes a library error to a pipeline stage.
    pub fn at(stage: &'static str) -> impl FnOnce(kreg_core::Error) -> CliError {
        move |e| match e {
            kreg_core::Error::Io(io) => CliError::Io(format!("{stage}: {io}")),
            kreg_core::Error::Format { .. } => CliError::Io(format!("{stage}: {e}")),
            other => CliError::Numerical { stage, msg: other.to_string() },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
