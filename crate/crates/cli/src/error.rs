use memeforge_annotate::AnnotateError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] memeforge_core::Error),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    /// Bad arguments or missing inputs.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 1 for user errors, 2 for everything else.
    pub fn exit_code(&self) -> u8 {
        let user = match self {
            CliError::Core(e) => e.is_user_error(),
            CliError::Annotate(e) => e.is_user_error(),
            CliError::Usage(_) => true,
            CliError::Io(_) => false,
        };
        if user {
            1
        } else {
            2
        }
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
