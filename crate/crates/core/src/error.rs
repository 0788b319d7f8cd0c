use std::path::PathBuf;

/// Errors produced across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor `{0}` is absent from the checkpoint")]
    TensorAbsent(String),

    #[error("dimension mismatch in {tensor}{}: expected {expected:?}, found {found:?}", layer_suffix(*.layer))]
    Dimension {
        layer: Option<usize>,
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{0}` contains non-finite values")]
    Corrupt(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("safetensors: {0}")]
    Format(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("token id {id} is outside the vocabulary (size {vocab_size})")]
    Decode { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds the context window of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite activations detected at layer {layer}")]
    NumericInstability { layer: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("missing trace data: {0}")]
    MissingTrace(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown key: {0}")]
    UnknownKey(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("annotation store: {0}")]
    Store(String),

    #[error("asset missing: {}", .0.display())]
    AssetMissing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!(" (layer {l})"),
        None => String::new(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
