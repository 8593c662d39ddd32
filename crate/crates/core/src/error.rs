use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ingest
    #[error("malformed manifest line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("cannot decode image {path}: {reason}")]
    DecodeError { path: PathBuf, reason: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("rectangle {rect:?} lies outside a {width}x{height} image")]
    RectOutOfBounds {
        rect: crate::ingest::Rect,
        width: u32,
        height: u32,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("record `{0}` has no concrete template label")]
    Unlabeled(String),

    // features
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("bin count {0} must be positive and divide 256")]
    BadBinCount(usize),
    #[error("image {width}x{height} is smaller than the required {min_width}x{min_height}")]
    ImageTooSmall {
        width: u32,
        height: u32,
        min_width: u32,
        min_height: u32,
    },
    #[error("bit-length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("corrupt feature store: {0}")]
    CorruptStore(String),
    #[error("feature kind mismatch: expected {expected}, got {actual}")]
    KindMismatch { expected: String, actual: String },

    // keypoints
    #[error("keypoint at ({x:.1}, {y:.1}) octave {octave} is too close to the border")]
    KeypointOutOfBounds { x: f32, y: f32, octave: u8 },

    // classify
    #[error("reference set is empty")]
    EmptyReference,
    #[error("feature does not match the {0} metric")]
    MetricFeatureMismatch(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("radius has not been calibrated")]
    RadiusUnset,
    #[error("training data contains a single class")]
    SingleClass,
    #[error("loss became non-finite at epoch {0}")]
    NonFiniteLoss(usize),
    #[error("image `{0}` has zero variance")]
    DegenerateImage(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("no reference point has a similar neighbour")]
    NoSimilarPairs,
    #[error("coefficient vector is zero")]
    ZeroCoefficients,

    // cluster
    #[error("covariance has rank {rank}, requested {requested} components")]
    RankDeficient { rank: usize, requested: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("cluster {0} has no medoid")]
    MissingMedoid(usize),
    #[error("unknown id `{0}`")]
    UnknownId(String),

    // metrics
    #[error("no ground truth for `{0}`")]
    MissingTruth(String),
    #[error("rating table row {row} sums to {sum}, expected {expected}")]
    RaggedTable { row: usize, sum: usize, expected: usize },

    // pipeline
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than a bug or an
    /// environment failure. The CLI maps these to exit code 1.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFinite(_) | Error::NonFiniteLoss(_))
    }
}
