//! Builds a trait-conditioned dialogue corpus with a chat model: seed
//! topics are classified out of source sentences, each topic becomes a
//! questioner/discloser dialogue, and every dialogue is checked back
//! against the trait it was written for.

pub mod dialogue;
pub mod error;
pub mod http;
pub mod journal;
pub mod mock;
pub mod prompts;
pub mod run;
pub mod topics;
pub mod validate;

pub use dialogue::{parse_dialogue, render_dialogue, synthesize_dialogue};
pub use error::{PipelineError, Result};
pub use http::{HttpChatClient, RetryPolicy};
pub use journal::Journal;
pub use mock::{MockRule, MockScript};
pub use run::{load_sources, run_pipeline, PipelineConfig, PipelineReport};
pub use topics::{classify_sentence, extract_seed_topics, split_sentences, Classification, Extraction, SeedTopic, SourceSentence};
pub use validate::{apply_manual_verdicts, auto_validate, load_manual_verdicts, pass_rate, ValidationVerdict};
