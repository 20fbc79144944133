use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule bounds: {0}")]
    InvalidBounds(String),

    #[error("timestep {t} out of range 1..={total}")]
    TimestepOutOfRange { t: usize, total: usize },

    #[error("timestep order: t_next={t_next} must be below t={t}")]
    TimestepOrder { t: usize, t_next: usize },

    #[error("multi-step chain underflows: {t_start} - ({steps}-1)*{delta} < 1")]
    TimestepUnderflow {
        t_start: usize,
        steps: usize,
        delta: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("tokenization failed: unknown word `{0}`")]
    Tokenization(String),

    #[error("invalid prompt pair: {0}")]
    Prompt(String),

    #[error("attention maps disagree on text length: {0} vs {1}")]
    InconsistentTokens(usize, usize),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("manifest {path}:{line}: {msg}")]
    ManifestParse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("manifest validation: {0}")]
    ManifestInvalid(String),

    #[error("empty manifest")]
    EmptyManifest,

    #[error("non-finite loss at sample `{sample}` (epoch {epoch})")]
    NanLoss { sample: String, epoch: usize },

    #[error("checkpoint missing entry `{0}`")]
    MissingKey(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("backbone topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("unsupported backbone kind `{0}`")]
    UnsupportedBackbone(String),

    #[error("image decode failed for {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("every image failed to score")]
    AllFailed,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
