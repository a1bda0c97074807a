use std::path::PathBuf;

/// Errors produced anywhere in the keyword-spotting pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed wav: {0}")]
    MalformedWav(String),
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("clip too short: {samples} samples, need at least {window}")]
    TooShort { samples: usize, window: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite value produced by {0}")]
    NonFiniteValue(String),
    #[error("backward called without a recorded forward pass")]
    GraphNotRecorded,
    #[error("minimum duration {m} frames is not below the shortest positive length {min_len}")]
    MinDurationTooLarge { m: usize, min_len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("positive utterance {0} has no end_frame")]
    MissingEndFrame(String),
    #[error("no positive examples")]
    NoPositives,
    #[error("no negative examples")]
    NoNegatives,
    #[error("no threshold reaches FAH <= {0}")]
    TargetUnreachable(f64),
    #[error("negative label present in classification manifest: {0}")]
    NegativeLabelPresent(String),
    #[error("no checkpoints found in {0}")]
    NoCheckpoints(PathBuf),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("sample rate mismatch: stream expects {expected} Hz, got {got} Hz")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("model container: {0}")]
    Container(String),
    #[error("utterance {key}: {source}")]
    Utterance {
        key: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_utterance(self, key: &str) -> Self {
        Error::Utterance {
            key: key.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
