//! Held-out language-model evaluation across trait conditions.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::DialogueRecord;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::par::{map_indexed, ExecMode};
use crate::persona::TraitId;

/// `values[c][t]`: mean masked cross-entropy (nats per discloser token) of
/// dialogues written in trait `traits[t]`'s style, with the model
/// conditioned on `traits[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeMatrix {
    pub traits: Vec<TraitId>,
    pub values: Vec<Vec<f64>>,
}

impl CeMatrix {
    fn off_mean(v: impl Iterator<Item = f64>) -> f64 {
        let v: Vec<f64> = v.collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Traits whose conditioned model scores its own text better than the
    /// average of the other traits' text.
    pub fn row_wins(&self) -> Vec<bool> {
        let n = self.traits.len();
        (0..n)
            .map(|k| self.values[k][k] < Self::off_mean((0..n).filter(|&j| j != k).map(|j| self.values[k][j])))
            .collect()
    }

    /// Traits whose text is scored better under its own condition than
    /// under the average other condition.
    pub fn column_wins(&self) -> Vec<bool> {
        let n = self.traits.len();
        (0..n)
            .map(|k| self.values[k][k] < Self::off_mean((0..n).filter(|&j| j != k).map(|j| self.values[j][k])))
            .collect()
    }

    /// Aligned text rendering, conditions as rows.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<6}", "cond");
        for t in &self.traits {
            s.push_str(&format!(" {:>7}", t.code()));
        }
        s.push('\n');
        for (c, row) in self.traits.iter().zip(&self.values) {
            s.push_str(&format!("{:<6}", c.code()));
            for v in row {
                s.push_str(&format!(" {v:>7.4}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Masked cross-entropy of one dialogue under condition `cond`.
pub fn dialogue_cross_entropy(model: &Model, record: &DialogueRecord, cond: TraitId, max_len: usize) -> Result<f64> {
    let seq = model.prepare(record, cond, max_len);
    let (targets, mask) = seq.shifted();
    let mut g = Graph::new();
    let (logits, _) = model.forward_graph(&mut g, &seq.ids[..seq.len() - 1], cond, false)?;
    let loss = g.cross_entropy(logits, &targets, &mask)?;
    Ok(g.scalar(loss))
}

/// Cross-entropy of every text trait under every condition, over the
/// traits present in `records`.
pub fn cross_entropy_matrix(
    model: &Model,
    records: &[DialogueRecord],
    max_len: usize,
    exec: ExecMode,
) -> Result<CeMatrix> {
    let traits: Vec<TraitId> =
        TraitId::all().into_iter().filter(|t| records.iter().any(|r| r.trait_id == *t)).collect();
    if traits.is_empty() {
        return Err(Error::Corpus("no evaluation records".into()));
    }
    let jobs: Vec<(TraitId, &DialogueRecord)> =
        traits.iter().flat_map(|&c| records.iter().map(move |r| (c, r))).collect();
    let losses = map_indexed(exec, &jobs, |_, (c, r)| dialogue_cross_entropy(model, r, *c, max_len));
    let mut sums = vec![vec![0.0; traits.len()]; traits.len()];
    let mut counts = vec![vec![0usize; traits.len()]; traits.len()];
    for ((c, r), loss) in jobs.iter().zip(losses) {
        let ci = traits.iter().position(|t| t == c).unwrap();
        let ti = traits.iter().position(|t| *t == r.trait_id).unwrap();
        sums[ci][ti] += loss?;
        counts[ci][ti] += 1;
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(s, n)| s.iter().zip(n).map(|(a, &b)| a / b as f64).collect())
        .collect();
    Ok(CeMatrix { traits, values })
}
