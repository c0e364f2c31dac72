use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("vocab size too small: need more than {needed} entries, got {requested}")]
    VocabTooSmall { needed: usize, requested: usize },

    #[error("unknown id {0}")]
    UnknownId(u32),

    #[error("invalid vocab file: {0}")]
    InvalidVocab(String),

    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },

    #[error("unknown breakdown symbol {symbol} at turn {turn}")]
    UnknownVote { symbol: String, turn: usize },

    #[error("no annotations")]
    NoAnnotations,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("distribution does not sum to 1 (sum = {0})")]
    NotNormalized(f64),

    #[error("prediction origins do not match gold: missing [{missing}], extra [{extra}]")]
    OriginMismatch { missing: String, extra: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint does not match model config: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid run config:\n  {}", .0.join("\n  "))]
    RunConfig(Vec<String>),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad user input (files, flags, configs)
    /// rather than by a defect in the program.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Json(_))
    }
}
