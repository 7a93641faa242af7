use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::generate;
use crate::model::Model;
use crate::par::{map_indexed, ExecMode};
use crate::persona::{Dimension, TraitId};

use super::{InventoryItem, LikertJudge};

/// Something that answers inventory prompts while conditioned on a trait.
pub trait Subject: Send + Sync {
    fn respond(&self, prompt: &str, t: TraitId, seed: u64) -> Result<String>;
}

/// The local model as a subject, conditioned purely through routing.
pub struct ModelSubject<'a> {
    pub model: &'a Model,
    pub max_new: usize,
    pub temperature: f64,
}

impl Subject for ModelSubject<'_> {
    fn respond(&self, prompt: &str, t: TraitId, seed: u64) -> Result<String> {
        generate(self.model, prompt, t, self.max_new, self.temperature, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub item_id: String,
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    pub run: usize,
    pub seed: u64,
    pub response: Option<String>,
    pub error: Option<String>,
}

fn mix(seed: u64, run: usize, item: usize) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ (run as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (item as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `repeats` independent responses per item, run-major. A failing subject
/// leaves an error marker on that transcript instead of aborting.
pub fn administer(
    subject: &dyn Subject,
    items: &[InventoryItem],
    t: TraitId,
    repeats: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<Vec<Transcript>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..repeats).flat_map(|r| (0..items.len()).map(move |i| (r, i))).collect();
    Ok(map_indexed(exec, &jobs, |_, &(run, i)| {
        let s = mix(seed, run, i);
        let (response, error) = match subject.respond(&items[i].text, t, s) {
            Ok(text) => (Some(text), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Transcript { item_id: items[i].id.clone(), trait_id: t, run, seed: s, response, error }
    }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item_id: String,
    pub dimension: Dimension,
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    pub run: usize,
    /// Judge output before reverse scoring.
    pub raw: Option<u8>,
    /// Oriented score; `None` when the response or the judgement is missing.
    pub score: Option<u8>,
    pub note: Option<String>,
}

/// Judges every transcript. Missing responses and failed judgements are
/// kept as absent scores with a note; a judge returning a value outside
/// 1..=5 is a contract violation and an error.
pub fn score(transcripts: &[Transcript], items: &[InventoryItem], judge: &dyn LikertJudge) -> Result<Vec<ScoredItem>> {
    if transcripts.is_empty() {
        return Err(Error::Assessment("no transcripts to score".into()));
    }
    transcripts
        .iter()
        .map(|tr| {
            let item = items
                .iter()
                .find(|i| i.id == tr.item_id)
                .ok_or_else(|| Error::Assessment(format!("transcript refers to unknown item {}", tr.item_id)))?;
            let mut out = ScoredItem {
                item_id: item.id.clone(),
                dimension: item.dimension,
                trait_id: tr.trait_id,
                run: tr.run,
                raw: None,
                score: None,
                note: tr.error.clone(),
            };
            if let Some(resp) = &tr.response {
                match judge.judge(item, resp) {
                    Ok(s) if (1..=5).contains(&s) => {
                        out.raw = Some(s);
                        out.score = Some(item.orient(s));
                    }
                    Ok(s) => {
                        return Err(Error::Assessment(format!("judge returned {s} for item {}, outside 1..5", item.id)))
                    }
                    Err(e) => out.note = Some(format!("judge failed: {e}")),
                }
            }
            Ok(out)
        })
        .collect()
}
