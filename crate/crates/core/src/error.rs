use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("bad magic bytes {found:?}, expected \"LATX\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("token id {id} at position {pos} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, pos: usize, vocab: usize },

    #[error("sequence length {len} outside [1, {max}]")]
    SequenceLength { len: usize, max: usize },

    #[error("invalid elimination request: {0}")]
    Elimination(String),

    #[error("non-positive fitted ACC {value} at layer {layer}")]
    NonPositiveAcc { layer: usize, value: f64 },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("empty input batch")]
    EmptyBatch,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("failed to parse inputs: {0}")]
    Inputs(String),

    #[error("I/O error on {path}: {source}")]
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

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
