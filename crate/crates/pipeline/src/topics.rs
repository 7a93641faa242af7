//! Seed-topic extraction: classify source sentences into facet-level
//! labels and keep the non-neutral ones as topics.

use std::sync::OnceLock;

use log::info;
use persona_core::chat::{ChatClient, DecodeParams};
use persona_core::{Dimension, Level, TraitId};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::prompts::seed_topic_system;

/// A sentence with a reference back to where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSentence {
    pub source_ref: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTopic {
    pub sentence: String,
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    /// `facet-high`, `facet-low` or `neutral`.
    pub facet_label: String,
    pub source_ref: String,
}

impl SeedTopic {
    pub fn is_neutral(&self) -> bool {
        self.facet_label == "neutral"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FacetLabel {
    Neutral,
    Facet { facet: String, level: Level },
}

impl FacetLabel {
    pub fn as_label(&self) -> String {
        match self {
            FacetLabel::Neutral => "neutral".into(),
            FacetLabel::Facet { facet, level } => format!("{facet}-{}", level.as_str()),
        }
    }
}

fn facet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b([a-z]+(?:-[a-z]+)*)-(high|low)\b").unwrap())
}

/// Reads the classifier's label from a reply that may also hold its
/// reasoning. The last `facet-high`/`facet-low` token wins; a reply with
/// no such token but the word "neutral" is neutral.
pub fn parse_facet_label(reply: &str) -> Option<FacetLabel> {
    let text = reply.to_lowercase().replace("activity level", "activity-level");
    if let Some(c) = facet_re().captures_iter(&text).last() {
        let level = if &c[2] == "high" { Level::High } else { Level::Low };
        return Some(FacetLabel::Facet { facet: c[1].to_string(), level });
    }
    text.contains("neutral").then_some(FacetLabel::Neutral)
}

/// Outcome for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Topic(SeedTopic),
    Dropped { source_ref: String, reason: String },
}

pub fn classify_sentence(
    sentence: &SourceSentence,
    d: Dimension,
    client: &dyn ChatClient,
    params: &DecodeParams,
) -> persona_core::Result<Classification> {
    let reply = client.complete(&seed_topic_system(d), &sentence.text, params)?;
    let drop = |reason: &str| Classification::Dropped { source_ref: sentence.source_ref.clone(), reason: reason.into() };
    Ok(match parse_facet_label(&reply) {
        Some(FacetLabel::Facet { facet, level }) => Classification::Topic(SeedTopic {
            sentence: sentence.text.clone(),
            trait_id: TraitId::new(d, level),
            facet_label: FacetLabel::Facet { facet, level }.as_label(),
            source_ref: sentence.source_ref.clone(),
        }),
        Some(FacetLabel::Neutral) => drop("neutral"),
        None => drop("unparseable label"),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub topics: Vec<SeedTopic>,
    pub drops: Vec<(String, String)>,
    /// Sentences classified so far.
    pub processed: usize,
}

/// Classifies every sentence along `d`, in order.
pub fn extract_seed_topics(
    sentences: &[SourceSentence],
    d: Dimension,
    client: &dyn ChatClient,
    params: &DecodeParams,
) -> Result<Extraction> {
    if sentences.is_empty() {
        return Err(PipelineError::Config("no sentences to extract topics from".into()));
    }
    let mut out = Extraction::default();
    for s in sentences {
        match classify_sentence(s, d, client, params) {
            Ok(Classification::Topic(t)) => out.topics.push(t),
            Ok(Classification::Dropped { source_ref, reason }) => {
                info!("dropped {source_ref} for {}: {reason}", d.name());
                out.drops.push((source_ref, reason));
            }
            Err(source) => return Err(PipelineError::Extraction { progress: Box::new(out), source }),
        }
        out.processed += 1;
    }
    Ok(out)
}

/// Splits an essay into sentences at `.`, `!` or `?` followed by
/// whitespace. References are `source_ref#k`, counting from 1.
pub fn split_sentences(source_ref: &str, essay: &str) -> Vec<SourceSentence> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = essay.as_bytes();
    let push = |s: &str, out: &mut Vec<SourceSentence>| {
        let s = s.trim();
        if !s.is_empty() {
            out.push(SourceSentence { source_ref: format!("{source_ref}#{}", out.len() + 1), text: s.to_string() });
        }
    };
    for i in 0..bytes.len() {
        let end = matches!(bytes[i], b'.' | b'!' | b'?');
        if end && bytes.get(i + 1).is_none_or(|b| b.is_ascii_whitespace()) {
            push(&essay[start..=i], &mut out);
            start = i + 1;
        }
    }
    push(&essay[start..], &mut out);
    out
}
