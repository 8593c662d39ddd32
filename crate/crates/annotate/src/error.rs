use thiserror::Error;

pub type Result<T> = std::result::Result<T, AnnotateError>;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("unknown annotator `{0}`")]
    UnknownAnnotator(String),
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("malformed verdict: {0}")]
    MalformedVerdict(String),
    #[error("no item has been judged by two or more annotators")]
    InsufficientJudgments,
    #[error("predicted template `{0}` has no reference image in the manifest")]
    MissingReference(String),
    #[error("prediction for `{0}` has no image in the manifest")]
    MissingImage(String),
    #[error("duplicate prediction for image `{image_id}` by method `{method}`")]
    DuplicatePrediction { image_id: String, method: String },
    #[error("corrupt judgment log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error(transparent)]
    Core(#[from] memeforge_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AnnotateError {
    /// Errors caused by the request or the input files rather than the
    /// service itself.
    pub fn is_user_error(&self) -> bool {
        match self {
            AnnotateError::Io(_) => false,
            AnnotateError::Core(e) => e.is_user_error(),
            _ => true,
        }
    }
}
