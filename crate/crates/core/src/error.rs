use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can report. Variants map one-to-one onto the
/// error kinds callers are expected to branch on.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncation { expected: u64, found: u64 },

    #[error("data error at row {row}, column {col}: {msg}")]
    Data { row: usize, col: usize, msg: String },

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("non-finite loss at step {step}")]
    Numerics { step: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("steered embedding cancelled to zero")]
    Cancellation,

    #[error("no exemplars for classes {0:?}")]
    Coverage(Vec<usize>),

    #[error("unknown class {0}")]
    UnknownClass(usize),

    #[error("both contrastive groups are empty")]
    EmptyGroups,

    #[error("similarity weights sum to zero")]
    DegenerateWeights,

    #[error("latent {0} is dead")]
    DeadFeature(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: usize, got: usize) -> Self {
        Error::Shape { expected, got }
    }
}
