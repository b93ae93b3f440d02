use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the captioning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab size below character inventory (requested {requested}, need at least {minimum})")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("vocab size {requested} unreachable: merges exhausted at {reached}")]
    VocabUnreachable { requested: usize, reached: usize },
    #[error("id out of range: {0}")]
    IdOutOfRange(u32),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    ExceedsMaxLen { len: usize, max_len: usize },
    #[error("trait id {id} out of range (num_traits = {num_traits})")]
    TraitOutOfRange { id: usize, num_traits: usize },
    #[error("feature map shape {rows}x{cols} does not match expected {want_rows}x{want_cols}")]
    FeatureShape {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("malformed sequence: {0}")]
    MalformedSequence(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("beam width must be at least 1")]
    InvalidBeam,
    #[error("invalid tradeoff parameters: {0}")]
    InvalidTradeoff(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("batch too small for distractors")]
    BatchTooSmall,
    #[error("length mismatch: {0} candidates vs {1} references")]
    LengthMismatch(usize, usize),
    #[error("empty references")]
    EmptyReferences,
    #[error("unsupported n-gram order {0}")]
    UnsupportedOrder(usize),

    #[error("dataset error in {file}{}: {msg}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Dataset {
        file: String,
        line: Option<usize>,
        msg: String,
    },
    #[error("invalid toy-world config: {0}")]
    ToyConfig(String),

    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("training diverged at {phase} epoch {epoch} step {step}: non-finite loss (diagnostic checkpoint: {diagnostic:?})")]
    Diverged {
        phase: String,
        epoch: usize,
        step: usize,
        diagnostic: Option<PathBuf>,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocab hash mismatch: checkpoint has {checkpoint}, vocab file has {vocab}")]
    VocabHashMismatch { checkpoint: String, vocab: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
