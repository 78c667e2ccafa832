use crate::composer::DistributionKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("unknown user key `{0}`")]
    MissingUser(String),

    #[error("empty input sequence")]
    EmptyInput,

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("cannot compose {kind:?}: missing {segment} segment")]
    Composition {
        kind: DistributionKind,
        segment: &'static str,
    },

    #[error("token id {token} outside vocabulary of size {size}")]
    Vocab { token: u32, size: usize },

    #[error("index {index} out of range for {len} candidates")]
    Index { index: usize, len: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::State(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
