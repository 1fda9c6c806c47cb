use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("gradient tape already consumed")]
    TapeConsumed,

    #[error("every position carries the ignore index; loss is undefined")]
    NoLabels,

    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint has unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("checkpoint lists tensor `{0}` more than once")]
    DuplicateTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("truncated data: {0}")]
    Truncated(String),

    #[error("checkpoint is already extended (heads={heads}, ffn={ffn})")]
    AlreadyExtended { heads: usize, ffn: usize },

    #[error("technique `{technique}` does not fit this checkpoint: {reason}")]
    TechniqueMismatch { technique: String, reason: String },

    #[error("nothing to train: the trainability mask selects no parameters")]
    NothingToTrain,

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("data format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by NaN/Inf arising during computation.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
