use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DialogueRecord;
use crate::error::{Error, Result};
use crate::persona::TraitId;

/// Stratified split: each trait contributes `round(n · eval_fraction)`
/// records to the eval side, clamped to `[1, n - 1]`. Both sides keep the
/// input order.
pub fn split(
    records: &[DialogueRecord],
    eval_fraction: f64,
    seed: u64,
) -> Result<(Vec<DialogueRecord>, Vec<DialogueRecord>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Config(format!("eval fraction must be in (0, 1), got {eval_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_eval = vec![false; records.len()];
    for t in TraitId::all() {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].trait_id == t).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Corpus(format!("trait {t} has fewer than 2 records")));
        }
        let n_eval = ((idx.len() as f64 * eval_fraction).round() as usize).clamp(1, idx.len() - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_eval] {
            is_eval[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (r, e) in records.iter().zip(is_eval) {
        if e {
            eval.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, eval))
}
