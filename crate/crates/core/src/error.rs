use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: value {value} outside the function domain")]
    Domain { op: &'static str, value: f64 },

    #[error("{op}: reduction over an empty axis")]
    EmptyReduction { op: &'static str },

    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),

    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),

    #[error("nce needs at least 2 candidates per positive, got {0}")]
    InsufficientCandidates(usize),

    #[error("{0}: zero-norm embedding")]
    DegenerateEmbedding(&'static str),

    #[error("zero activation vector while extracting d-vector for {0}")]
    DegenerateDvector(String),

    #[error("impulse response is all zeros")]
    DegenerateRir,

    #[error("utterance {id} has {len} samples, shorter than one chunk of {chunk}")]
    TooShort { id: String, len: usize, chunk: usize },

    #[error("wav format error in {path}: {field}")]
    WavFormat { path: PathBuf, field: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("duplicate utterance id {id} at line {line}")]
    Uniqueness { id: String, line: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("speaker {0} has no enrollment material")]
    Coverage(String),

    #[error("requested {requested} {kind} trials but only {available} are available")]
    TrialCount {
        kind: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("non-finite gradient in {tensor} at step {step}")]
    NonFiniteGradient { step: u64, tensor: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("unknown speaker label {0}")]
    LabelMap(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("verification needs both genuine and impostor trials")]
    InsufficientTrials,

    #[error("nothing to evaluate: {0}")]
    EmptyEval(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
