use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("idx: bad magic bytes {0:02x?}")]
    IdxBadMagic([u8; 2]),

    #[error("idx: unsupported element type 0x{0:02x}")]
    IdxUnsupportedType(u8),

    #[error("idx: truncated input, expected {expected} bytes but found {actual}")]
    IdxTruncated { expected: usize, actual: usize },

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing {kind} for connection {dest} <- {src}")]
    MissingConnection {
        kind: &'static str,
        dest: usize,
        src: usize,
    },

    #[error("parameter sets do not line up: {0}")]
    KeyMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset split expects {expected} examples, got {actual}")]
    SplitCount { expected: usize, actual: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
