use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnnError {
    /// Invalid configuration or an unsatisfied precondition.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown channel `{0}`")]
    UnknownChannel(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("empty selection: {0}")]
    Empty(String),

    /// Non-finite loss or prediction; `step` is the optimizer step or unroll step.
    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnnError> = std::result::Result<T, E>;
