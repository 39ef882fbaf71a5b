use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty signal")]
    EmptySignal,

    #[error("expected {expected_khz} kHz, got {actual} Hz")]
    SampleRate { expected_khz: f64, actual: u32 },

    #[error("signal shorter than one hop ({len} < {hop} samples)")]
    TooShort { len: usize, hop: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("insufficient data for initialization: need {needed} frames, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("zero-norm mean")]
    ZeroNormMean,

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("dsp fingerprint mismatch: expected `{expected}`, got `{actual}`")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("unknown utterance id `{0}`")]
    UnknownId(String),

    #[error("duplicate utterance id `{0}`")]
    DuplicateId(String),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
