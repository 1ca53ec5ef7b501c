use thiserror::Error;

/// Errors produced while building or differentiating a graph.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate output size: {0}")]
    DegenerateOutput(String),

    #[error("pooling window {window:?} larger than input {input:?}")]
    WindowTooLarge {
        window: (usize, usize),
        input: (usize, usize),
    },

    #[error("backward root must be a scalar, got {numel} elements")]
    NonScalarRoot { numel: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("batch of size 0")]
    EmptyBatch,

    #[error("empty tensor list")]
    EmptyList,
}

/// Errors produced while reading or writing parameter checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad checkpoint magic (expected \"SPNW\")")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("checkpoint entry name is not valid UTF-8")]
    InvalidName,

    #[error("entry {name}: shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),

    #[error("checkpoint has unexpected parameter {0}")]
    UnexpectedParam(String),
}
