use thiserror::Error;

/// Command failures, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] empathic_core::Error),
}

impl CliError {
    /// 1 for anything the caller can fix in their inputs, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        use empathic_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Input(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Core(e) => match e {
                E::Validation { .. }
                | E::InvalidArgument(_)
                | E::UnknownFormat(_)
                | E::MissingFields(_)
                | E::SchemaVersion { .. }
                | E::MissingAudio { .. }
                | E::Json(_) => 1,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
