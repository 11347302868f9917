use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("query row {row} has no visible key")]
    FullyMasked { row: usize },

    #[error("kv cache capacity exhausted: need {needed} blocks, {available} available")]
    Capacity { needed: usize, available: usize },

    #[error("unknown sequence id {0}")]
    UnknownSequence(u64),

    #[error("rewind to {requested} exceeds written length {written}")]
    Rewind { requested: usize, written: usize },

    #[error("distribution does not sum to one (sum = {sum})")]
    MalformedDist { sum: f64 },

    #[error("guided decoding dead state {state}: no token allowed")]
    DeadState { state: usize },

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
