use thiserror::Error;

/// Errors raised anywhere in the core crate. Each variant names the
/// subsystem it originates from so callers (the CLI in particular) can
/// report where a failure happened.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("routing: unknown trait {0}")]
    UnknownTrait(String),

    #[error("invalid expert weighting: {0}")]
    InvalidWeighting(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("corpus line {line}: {message}")]
    CorpusLine { line: usize, message: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("training: {0}")]
    Training(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("statistics: {0}")]
    Statistics(String),

    #[error("assessment: {0}")]
    Assessment(String),

    #[error("chat client: {0}")]
    Client(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
