use cardio_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl From<cardio_autodiff::AutodiffError> for CliError {
    fn from(e: cardio_autodiff::AutodiffError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 2 for failures of the optimization itself, 1 for everything the user
    /// can fix (bad config, missing files, mismatched checkpoints).
    pub fn exit_code(&self) -> i32 {
        if matches!(self, CliError::Core(e) if e.is_numerical()) {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
