use thiserror::Error;
use xva_core::error::XvaError;

/// Failures of a command, each mapped to a stable exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] XvaError),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_PATH_BUDGET: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_INVALID,
            CliError::Verify(_) => EXIT_VERIFY,
            CliError::Io(_) => EXIT_RUNTIME,
            CliError::Core(e) => match e {
                XvaError::Domain(_) | XvaError::Singular(_) | XvaError::Condition { .. } | XvaError::Parse(_) => {
                    EXIT_INVALID
                }
                XvaError::InvalidPaths { .. } => EXIT_PATH_BUDGET,
                XvaError::Coverage { .. } | XvaError::Margin(_) | XvaError::NonFinite(_) | XvaError::Io(_) => {
                    EXIT_RUNTIME
                }
            },
        }
    }
}
