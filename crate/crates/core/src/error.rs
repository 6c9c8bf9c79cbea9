use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("closure is not deterministic: repeated evaluation gave {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("batch norm evaluated before any running statistics were collected")]
    MissingRunningStats,

    #[error("{path}: unsupported audio: {reason}")]
    UnsupportedAudio { path: PathBuf, reason: String },

    #[error("utterance too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{manifest}:{line}: audio file {audio} does not exist")]
    MissingAudio {
        manifest: PathBuf,
        line: usize,
        audio: PathBuf,
    },

    #[error("{path}: malformed container: {msg}")]
    Container { path: PathBuf, msg: String },

    #[error("missing embeddings for ids: {0:?}")]
    MissingIds(Vec<String>),

    #[error("zero-norm embedding vector")]
    ZeroNorm,

    #[error("score set needs at least one target and one non-target trial")]
    DegenerateLabels,

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error in {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
