use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::DialogueRecord;
use crate::error::{Error, Result};
use crate::persona::TraitId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub dialogue_count: usize,
    pub avg_turns: f64,
    /// Mean over dialogues of that dialogue's words per turn.
    pub avg_words_per_turn: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub per_trait: Vec<(TraitId, StatsRow)>,
    /// Dialogue-count-weighted means of the per-trait rows.
    pub overall: StatsRow,
}

/// Words are whitespace-separated tokens. Traits without dialogues are
/// left out of `per_trait`.
pub fn corpus_stats(records: &[DialogueRecord]) -> Result<CorpusStats> {
    if records.is_empty() {
        return Err(Error::Corpus("cannot compute statistics of an empty corpus".into()));
    }
    let mut per_trait = Vec::new();
    for t in TraitId::all() {
        let mine: Vec<&DialogueRecord> = records.iter().filter(|r| r.trait_id == t).collect();
        if mine.is_empty() {
            continue;
        }
        let n = mine.len() as f64;
        let turns: f64 = mine.iter().map(|r| r.turns.len() as f64).sum();
        let wpt: f64 = mine
            .iter()
            .map(|r| {
                let words: usize = r.turns.iter().map(|t| t.text.split_whitespace().count()).sum();
                words as f64 / r.turns.len() as f64
            })
            .sum();
        per_trait.push((
            t,
            StatsRow { dialogue_count: mine.len(), avg_turns: turns / n, avg_words_per_turn: wpt / n },
        ));
    }
    let total: usize = per_trait.iter().map(|(_, s)| s.dialogue_count).sum();
    let weighted = |f: fn(&StatsRow) -> f64| {
        per_trait.iter().map(|(_, s)| s.dialogue_count as f64 * f(s)).sum::<f64>() / total as f64
    };
    let overall = StatsRow {
        dialogue_count: total,
        avg_turns: weighted(|s| s.avg_turns),
        avg_words_per_turn: weighted(|s| s.avg_words_per_turn),
    };
    Ok(CorpusStats { per_trait, overall })
}

impl CorpusStats {
    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>10} {:>10} {:>14}", "trait", "dialogues", "avg_turns", "words_per_turn");
        let rows = self
            .per_trait
            .iter()
            .map(|(t, r)| (t.code(), r))
            .chain(std::iter::once(("overall".to_string(), &self.overall)));
        for (name, r) in rows {
            let _ = writeln!(
                s,
                "{:<8} {:>10} {:>10.2} {:>14.2}",
                name, r.dialogue_count, r.avg_turns, r.avg_words_per_turn
            );
        }
        s
    }
}
