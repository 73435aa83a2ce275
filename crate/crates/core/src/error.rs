use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("tape is empty or already consumed")]
    EmptyTape,
    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministicFunction { first: f64, second: f64 },
    #[error("input too short: need at least {needed} samples, got {got}")]
    InputTooShort { needed: usize, got: usize },
    #[error("{what} ({value}) is not divisible by {by}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        by: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("bad ROI frame shape {0:?}, expected [1, 50, 50]")]
    BadFrameShape(Vec<usize>),
    #[error("timestamp regression: {got} after {last}")]
    TimestampRegression { last: u64, got: u64 },
    #[error("session poisoned: {0}")]
    SessionPoisoned(String),
    #[error("session already finished")]
    AlreadyFinished,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("position {0:?} is not strictly inside the room")]
    PositionOutOfRoom([f64; 3]),
    #[error("source '{0}' is silent")]
    SilentSource(String),
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    UnsupportedSampleRate(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unexpected end of file")]
    UnexpectedEof,
    #[error("tensor '{name}' does not fit: expected {expected}, found {found}")]
    TensorMismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error("unknown tensor '{0}' in checkpoint")]
    UnknownTensor(String),
    #[error("checkpoint is missing tensor '{0}'")]
    MissingTensor(String),
    #[error("duplicate tensor name '{0}'")]
    DuplicateTensor(String),

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
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data (files, configs), as opposed
    /// to failed numerical checks.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            Error::NonDeterministicFunction { .. } | Error::NonFiniteLoss { .. }
        )
    }
}
