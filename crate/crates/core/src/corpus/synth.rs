//! Synthetic trait styles. Every trait writes with its own unigram
//! distribution over a 32-symbol alphabet, so trait expression can be
//! measured exactly (total-variation distance, likelihood) at desk scale.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DialogueRecord, Speaker, Turn};
use crate::error::{Error, Result};
use crate::persona::TraitId;

pub const ALPHABET: &[u8; 32] = b"abcdefghijklmnopqrstuvwxyz012345";

/// Smallest pairwise total-variation distance a style set may have.
pub const MIN_STYLE_TV: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitStyle {
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    pub probs: Vec<f64>,
}

/// Length parameters shared by every style (inclusive ranges).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnShape {
    pub exchanges: (usize, usize),
    pub words_per_turn: (usize, usize),
    pub word_len: (usize, usize),
}

impl Default for TurnShape {
    fn default() -> Self {
        Self { exchanges: (1, 2), words_per_turn: (3, 6), word_len: (1, 4) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    styles: Vec<TraitStyle>,
    neutral: Vec<f64>,
    shape: TurnShape,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.len() != ALPHABET.len() {
        return Err(Error::Corpus(format!("{what}: {} probabilities for {} symbols", p.len(), ALPHABET.len())));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Corpus(format!("{what}: negative or non-finite probability")));
    }
    let s: f64 = p.iter().sum();
    if s <= 0.0 || (s - 1.0).abs() > 1e-9 {
        return Err(Error::Corpus(format!("{what}: probabilities sum to {s}")));
    }
    Ok(())
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

impl StyleSpec {
    pub fn new(styles: Vec<TraitStyle>, neutral: Vec<f64>, shape: TurnShape) -> Result<Self> {
        if styles.is_empty() {
            return Err(Error::Corpus("no trait styles".into()));
        }
        check_distribution(&neutral, "neutral style")?;
        for s in &styles {
            check_distribution(&s.probs, &format!("style {}", s.trait_id))?;
        }
        for (i, a) in styles.iter().enumerate() {
            for b in &styles[i + 1..] {
                if a.trait_id == b.trait_id {
                    return Err(Error::Corpus(format!("trait {} has two styles", a.trait_id)));
                }
                let tv = total_variation(&a.probs, &b.probs);
                if tv < MIN_STYLE_TV {
                    return Err(Error::Corpus(format!(
                        "styles {} and {} are too close (TV {tv:.3} < {MIN_STYLE_TV})",
                        a.trait_id, b.trait_id
                    )));
                }
            }
        }
        let (lo, hi) = (shape.words_per_turn, shape.word_len);
        if shape.exchanges.0 == 0 || lo.0 == 0 || hi.0 == 0
            || shape.exchanges.0 > shape.exchanges.1 || lo.0 > lo.1 || hi.0 > hi.1
        {
            return Err(Error::Corpus(format!("invalid turn shape {shape:?}")));
        }
        Ok(Self { styles, neutral, shape })
    }

    /// Ten styles: each trait puts extra mass on three symbols of its own
    /// (chosen by a seeded permutation); the questioner style is uniform.
    /// Any two styles are 0.6 apart in total variation.
    pub fn standard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..ALPHABET.len()).collect();
        perm.shuffle(&mut rng);
        let n = ALPHABET.len() as f64;
        let styles = TraitId::all()
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let mut probs = vec![0.4 / n; ALPHABET.len()];
                for &s in &perm[3 * k..3 * k + 3] {
                    probs[s] += 0.2;
                }
                TraitStyle { trait_id: t, probs }
            })
            .collect();
        Self::new(styles, vec![1.0 / n; ALPHABET.len()], TurnShape::default()).expect("standard styles are valid")
    }

    pub fn styles(&self) -> &[TraitStyle] {
        &self.styles
    }

    pub fn style(&self, t: TraitId) -> Option<&[f64]> {
        self.styles.iter().find(|s| s.trait_id == t).map(|s| s.probs.as_slice())
    }

    pub fn neutral(&self) -> &[f64] {
        &self.neutral
    }

    pub fn shape(&self) -> TurnShape {
        self.shape
    }

    pub fn traits(&self) -> Vec<TraitId> {
        self.styles.iter().map(|s| s.trait_id).collect()
    }

    fn sample_turn(&self, dist: &WeightedIndex<f64>, rng: &mut ChaCha8Rng) -> String {
        let (w0, w1) = self.shape.words_per_turn;
        let (l0, l1) = self.shape.word_len;
        let words = rng.random_range(w0..=w1);
        let mut out = String::new();
        for w in 0..words {
            if w > 0 {
                out.push(' ');
            }
            for _ in 0..rng.random_range(l0..=l1) {
                out.push(ALPHABET[dist.sample(rng)] as char);
            }
        }
        out
    }
}

/// `n_per_trait` dialogues for every style, trait-major order, deterministic
/// under `seed`.
pub fn synth_corpus(spec: &StyleSpec, n_per_trait: usize, seed: u64) -> Result<Vec<DialogueRecord>> {
    if n_per_trait == 0 {
        return Err(Error::Corpus("n_per_trait must be at least 1".into()));
    }
    let weighted = |p: &[f64]| {
        WeightedIndex::new(p.iter().copied()).map_err(|e| Error::Corpus(format!("degenerate style: {e}")))
    };
    let neutral = weighted(&spec.neutral)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_trait * spec.styles.len());
    for style in &spec.styles {
        let dist = weighted(&style.probs)?;
        for _ in 0..n_per_trait {
            let (e0, e1) = spec.shape.exchanges;
            let exchanges = rng.random_range(e0..=e1);
            let mut turns = Vec::with_capacity(2 * exchanges);
            for _ in 0..exchanges {
                turns.push(Turn { speaker: Speaker::Questioner, text: spec.sample_turn(&neutral, &mut rng) });
                turns.push(Turn { speaker: Speaker::Discloser, text: spec.sample_turn(&dist, &mut rng) });
            }
            out.push(DialogueRecord {
                trait_id: style.trait_id,
                topic: format!("topic-{:02}", rng.random_range(0..20)),
                turns,
            });
        }
    }
    Ok(out)
}

fn symbol_counts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<usize> {
    let mut counts = vec![0usize; ALPHABET.len()];
    for text in texts {
        for b in text.bytes() {
            if let Some(i) = ALPHABET.iter().position(|&a| a == b) {
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Empirical distribution of alphabet symbols in `text` (other bytes are
/// ignored); `None` when no alphabet symbol occurs.
pub fn unigram(text: &str) -> Option<Vec<f64>> {
    let counts = symbol_counts([text]);
    let n: usize = counts.iter().sum();
    (n > 0).then(|| counts.iter().map(|&c| c as f64 / n as f64).collect())
}

/// The style under which the dialogue's discloser text is most likely.
pub fn classify_by_style(record: &DialogueRecord, spec: &StyleSpec) -> TraitId {
    let counts = symbol_counts(record.discloser_text());
    let score = |p: &[f64]| -> f64 {
        counts
            .iter()
            .zip(p)
            .filter(|(&c, _)| c > 0)
            .map(|(&c, &q)| c as f64 * q.max(1e-300).ln())
            .sum()
    };
    let mut best = &spec.styles[0];
    let mut best_score = score(&best.probs);
    for s in &spec.styles[1..] {
        let v = score(&s.probs);
        if v > best_score {
            best = s;
            best_score = v;
        }
    }
    best.trait_id
}
