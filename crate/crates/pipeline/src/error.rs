use thiserror::Error;

use crate::topics::Extraction;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] persona_core::Error),

    #[error("http: {0}")]
    Http(String),

    /// A chat call kept failing part-way through topic extraction. The
    /// topics and drops gathered before the failure are kept.
    #[error("topic extraction stopped after {} of the sentences: {source}", progress.processed)]
    Extraction { progress: Box<Extraction>, source: persona_core::Error },

    /// A chat call kept failing during a pipeline run. Work finished before
    /// the failure is in the journal; rerunning resumes from there.
    #[error("pipeline interrupted during {stage} ({completed} units journaled): {source}")]
    Interrupted { stage: &'static str, completed: usize, source: persona_core::Error },

    #[error("dialogue line {line}: {message}")]
    DialogueParse { line: usize, message: String },

    #[error("journal: {0}")]
    Journal(String),

    #[error("invalid pipeline configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
