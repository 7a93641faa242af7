//! Dialogue records, JSON-lines ingestion, corpus statistics, the synthetic
//! trait-styled generator and stratified splitting.

mod io;
mod split;
mod stats;
mod synth;

use serde::{Deserialize, Serialize};

use crate::persona::TraitId;

pub use io::{load_dialogues, load_dialogues_strict, parse_dialogue_line, write_dialogues, LineError, Loaded};
pub use split::split;
pub use stats::{corpus_stats, CorpusStats, StatsRow};
pub use synth::{
    classify_by_style, synth_corpus, total_variation, unigram, StyleSpec, TraitStyle, ALPHABET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Questioner,
    Discloser,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    pub topic: String,
    pub turns: Vec<Turn>,
}

impl DialogueRecord {
    /// At least two turns, questioner first, speakers strictly alternating.
    pub fn validate(&self) -> Result<(), String> {
        if self.turns.len() < 2 {
            return Err(format!("dialogue has {} turns, need at least 2", self.turns.len()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Speaker::Questioner } else { Speaker::Discloser };
            if turn.speaker != want {
                return Err(format!("turn {i} is spoken by the {:?}, expected the {want:?}", turn.speaker));
            }
        }
        Ok(())
    }

    pub fn discloser_text(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::Discloser)
            .map(|t| t.text.as_str())
    }
}
