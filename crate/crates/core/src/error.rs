use std::path::PathBuf;

/// Errors produced by the codec, the sort pass, the simulator and file IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value {value} at index {index}")]
    InvalidValue { index: usize, value: f64 },

    #[error("block maximum {max_abs:e} needs exponent {exponent}, above the format limit {limit}")]
    ExponentOverflow {
        max_abs: f64,
        exponent: i32,
        limit: i32,
    },

    #[error("block {block} of row {row}: {source}")]
    AtBlock {
        row: usize,
        block: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid format: {0}")]
    InvalidFormat(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt packed buffer: {0}")]
    CorruptBuffer(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("invalid rope tables: {0}")]
    InvalidRopeTables(String),

    #[error("plan does not match weights: {0}")]
    PlanMismatch(String),

    #[error("not a tensor file (bad magic)")]
    NotATensorFile,

    #[error("corrupt tensor file: {0}")]
    CorruptFile(String),

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
