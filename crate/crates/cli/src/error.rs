use thiserror::Error;

/// Failure classes of the command-line tool, each with a fixed exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config or missing inputs the user must fix. Exit 2.
    #[error("{0}")]
    Config(String),
    /// The leakage audit found shared subjects. Exit 3.
    #[error("{0}")]
    Audit(String),
    /// Anything that failed while running. Exit 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Audit(_) => 3,
        }
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<voxfuse::train::TrainError> for CliError {
    fn from(e: voxfuse::train::TrainError) -> Self {
        use voxfuse::train::TrainError;
        match e {
            TrainError::Leakage(_) => CliError::Audit(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
