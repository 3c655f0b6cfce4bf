use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("invalid side {side}: must be positive and divisible by patch size {patch}")]
    InvalidSide { side: usize, patch: usize },
    #[error("{format} prompts cannot hold {n} images")]
    TooManyImages { format: &'static str, n: usize },
    #[error("unsupported image count {0} for a grid collage")]
    UnsupportedCount(usize),
    #[error("source record {0} appears more than once in one prompt")]
    DuplicateSource(String),
    #[error("corpus has {have} records, need at least {need}")]
    CorpusTooSmall { have: usize, need: usize },
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no image spans to aggregate over")]
    EmptySpans,
    #[error("layer {layer} out of range for a {n_layers}-layer tensor")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no threshold for {format} with {n} images")]
    UnsupportedCombination { format: &'static str, n: usize },
    #[error("answer is empty")]
    EmptyAnswer,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),
    #[error("non-finite loss on pair {pair_id}")]
    NonFiniteLoss { pair_id: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("config: {0}")]
    Config(String),
    #[error("bad {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
