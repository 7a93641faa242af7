//! Trait-conditioned sampling from the model.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Baseline, Model};
use crate::persona::TraitId;
use crate::tensor::softmax;
use crate::tokenizer::{decode, trait_tag, BOS, EOS, PAD, SEP};

/// The model's reply to `prompt` under trait `t`.
///
/// The context is `BOS [tag] prompt SEP`, the layout of a questioner turn
/// followed by the start of a discloser turn. Generation stops at the
/// first end-of-turn token (`SEP` or `EOS`), after `max_new` tokens, or at
/// the context limit. Temperature 0 is greedy decoding; otherwise tokens
/// are sampled from the tempered softmax with a generator seeded by `seed`.
pub fn generate(
    model: &Model,
    prompt: &str,
    t: TraitId,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<String> {
    if max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be >= 0, got {temperature}")));
    }
    model.route(t)?;
    let mut ids = vec![BOS];
    if model.baseline() == Baseline::SingleLora {
        ids.extend(trait_tag(t).bytes().map(usize::from));
    }
    ids.extend(prompt.bytes().map(usize::from));
    ids.push(SEP);
    let ctx = model.config().context_len;
    if ids.len() > ctx {
        let cut = ids.len() - ctx;
        ids.drain(1..1 + cut);
    }
    let start = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..max_new {
        if ids.len() >= ctx {
            break;
        }
        let logits = model.forward(&ids, t)?;
        let last = logits.row(logits.rows() - 1);
        let next = if temperature == 0.0 {
            argmax(last)
        } else {
            let scaled: Vec<f64> = last.iter().map(|v| v / temperature).collect();
            let probs = softmax(&scaled);
            WeightedIndex::new(&probs)
                .map_err(|e| Error::Training(format!("sampling distribution: {e}")))?
                .sample(&mut rng)
        };
        if matches!(next, EOS | SEP | BOS | PAD) {
            break;
        }
        ids.push(next);
    }
    decode(&ids[start..])
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
