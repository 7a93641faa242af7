//! Training loop: frozen base, Adam over adapters, routers and the
//! personality table, LM loss on discloser tokens plus the routing
//! regularizer computed once per step from the routing parameters.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::DialogueRecord;
use crate::error::{Error, Result};
use crate::model::{Baseline, Model, ModelConfig, SlotVar};
use crate::objectives::{total_loss, LossBreakdown, RegularizerMode};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::par::{map_indexed, ExecMode};
use crate::persona::TraitId;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSeq;

/// Learning rates of the reference grid.
pub const LR_GRID: [f64; 3] = [5e-5, 5e-4, 5e-3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Token budgets of the prompt side and the response side; a dialogue
    /// is cut to their sum (and to the context length).
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub lambda: f64,
    pub mode: RegularizerMode,
    pub seed: u64,
    pub baseline: Baseline,
    /// Clip the global gradient norm to 1.0 before each update.
    pub clip_grad_norm: bool,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 5e-4,
            max_input_len: 128,
            max_output_len: 64,
            lambda: 0.1,
            mode: RegularizerMode::Psl,
            seed: 0,
            baseline: Baseline::Moe,
            clip_grad_norm: false,
            max_steps: None,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_input_len + self.max_output_len < 2 {
            return Err(Error::Config("sequence budget too small".into()));
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.max_input_len + self.max_output_len
    }

    /// Optimizer steps a full run takes on `n` records.
    pub fn planned_steps(&self, n: usize) -> usize {
        let full = n.div_ceil(self.batch_size) * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// One line of the JSON-lines run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lm: f64,
    pub psl: f64,
    pub aux: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub baseline: Baseline,
    pub steps: Vec<StepRecord>,
    /// Final `[N, |P|]` weighting matrix of every router.
    pub final_weighting: Vec<Tensor>,
    pub base_checksum: String,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn lm_curve(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.lm).collect()
    }
}

/// Loss and slot gradients of one sequence.
fn sequence_grads(
    model: &Model,
    seq: &TokenSeq,
    t: TraitId,
) -> Result<(f64, Vec<(usize, usize, Vec<f64>)>)> {
    let (targets, mask) = seq.shifted();
    let mut g = Graph::new();
    let (logits, slots) = model.forward_graph(&mut g, &seq.ids[..seq.len() - 1], t, true)?;
    let loss = g.cross_entropy(logits, &targets, &mask)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    let parts = collect(&grads, &slots);
    Ok((value, parts))
}

fn collect(grads: &crate::autodiff::Gradients, slots: &[SlotVar]) -> Vec<(usize, usize, Vec<f64>)> {
    slots
        .iter()
        .filter_map(|s| grads.get(s.var).map(|gr| (s.slot, s.offset, gr.to_vec())))
        .collect()
}

fn accumulate(buffers: &mut [Vec<f64>], parts: &[(usize, usize, Vec<f64>)], scale: f64) {
    for (slot, offset, g) in parts {
        let dst = &mut buffers[*slot][*offset..*offset + g.len()];
        for (d, v) in dst.iter_mut().zip(g) {
            *d += scale * v;
        }
    }
}

/// Per-router `(psl, aux)` values at the current parameters, without
/// gradients.
pub fn regularizer_values(model: &Model) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let (psl, aux, _) = model.regularizer_graph(&mut g, false)?;
    Ok((psl.iter().map(|&v| g.scalar(v)).collect(), aux.iter().map(|&v| g.scalar(v)).collect()))
}

/// Mean masked cross-entropy of a batch of already-prepared sequences.
pub fn batch_lm_loss(model: &Model, batch: &[(TokenSeq, TraitId)], exec: ExecMode) -> Result<f64> {
    let losses = map_indexed(exec, batch, |_, (seq, t)| -> Result<f64> {
        let (targets, mask) = seq.shifted();
        let mut g = Graph::new();
        let (logits, _) = model.forward_graph(&mut g, &seq.ids[..seq.len() - 1], *t, false)?;
        let loss = g.cross_entropy(logits, &targets, &mask)?;
        Ok(g.scalar(loss))
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Loss breakdown of one batch at the current parameters (no update).
pub fn evaluate_batch(
    model: &Model,
    batch: &[(TokenSeq, TraitId)],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let lm = batch_lm_loss(model, batch, cfg.exec)?;
    let (psl, aux) = regularizer_values(model)?;
    total_loss(lm, &psl, Some(&aux), effective_lambda(model, cfg), effective_mode(model, cfg))
}

fn effective_mode(model: &Model, cfg: &TrainConfig) -> RegularizerMode {
    if model.baseline() == Baseline::Moe {
        cfg.mode
    } else {
        RegularizerMode::None
    }
}

fn effective_lambda(model: &Model, cfg: &TrainConfig) -> f64 {
    if effective_mode(model, cfg) == RegularizerMode::None {
        0.0
    } else {
        cfg.lambda
    }
}

fn check_corpus(model: &Model, corpus: &[DialogueRecord]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let k = model.trait_count();
    if model.baseline() != Baseline::SingleLora {
        if let Some(r) = corpus.iter().find(|r| r.trait_id.index() >= k) {
            return Err(Error::UnknownTrait(format!("{} (model has {k} traits)", r.trait_id)));
        }
    }
    if model.baseline() == Baseline::Moe {
        let missing: Vec<String> = (0..k)
            .filter_map(TraitId::from_index)
            .filter(|t| !corpus.iter().any(|r| r.trait_id == *t))
            .map(|t| t.code())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("no training data for traits {}", missing.join(", "))));
        }
    }
    Ok(())
}

/// Loss breakdown of `batch` and the gradient of its total with respect
/// to every trainable parameter, in [`Model::params`] order.
pub fn batch_gradients(
    model: &Model,
    batch: &[&(TokenSeq, TraitId)],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch("empty batch".into()));
    }
    let mode = effective_mode(model, cfg);
    let lambda = effective_lambda(model, cfg);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let results = map_indexed(cfg.exec, batch, |_, (seq, t)| sequence_grads(model, seq, *t));
    let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut lm = 0.0;
    for r in results {
        let (loss, parts) = r?;
        lm += loss;
        accumulate(&mut grads, &parts, scale);
    }
    lm *= scale;

    let mut g = Graph::new();
    let (psl_vars, aux_vars, reg_slots) = model.regularizer_graph(&mut g, true)?;
    let psl: Vec<f64> = psl_vars.iter().map(|&v| g.scalar(v)).collect();
    let aux: Vec<f64> = aux_vars.iter().map(|&v| g.scalar(v)).collect();
    let chosen = match mode {
        RegularizerMode::Aux => &aux_vars,
        _ => &psl_vars,
    };
    if mode != RegularizerMode::None && lambda > 0.0 && !chosen.is_empty() {
        let mut acc = chosen[0];
        for &v in &chosen[1..] {
            acc = g.add(acc, v)?;
        }
        let reg = g.scale(acc, lambda / chosen.len() as f64);
        let rg = g.backward(reg)?;
        accumulate(&mut grads, &collect(&rg, &reg_slots), 1.0);
    }
    Ok((total_loss(lm, &psl, Some(&aux), lambda, mode)?, grads))
}

/// Trains `model` in place. `log` receives one JSON line per step;
/// `observer` sees every step's record together with the parameters the
/// step's losses were computed at (before the update).
pub fn train_with(
    cfg: &TrainConfig,
    corpus: &[DialogueRecord],
    model: &mut Model,
    mut log: Option<&mut dyn Write>,
    observer: &mut dyn FnMut(&StepRecord, &Model) -> Result<()>,
) -> Result<RunReport> {
    cfg.validate()?;
    if cfg.baseline != model.baseline() {
        return Err(Error::Config(format!(
            "config asks for {} but the model is {}",
            cfg.baseline,
            model.baseline()
        )));
    }
    check_corpus(model, corpus)?;
    let started = Instant::now();
    let checksum = model.base_checksum();
    let seqs: Vec<(TokenSeq, TraitId)> = corpus
        .iter()
        .map(|r| (model.prepare(r, r.trait_id, cfg.max_len()), r.trait_id))
        .collect();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(AdamConfig { lr: cfg.learning_rate, ..Default::default() }, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fb_a7c4);
    let planned = cfg.planned_steps(corpus.len());
    let mut steps = Vec::with_capacity(planned);
    let mut order: Vec<usize> = (0..seqs.len()).collect();

    'outer: for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if steps.len() >= planned {
                break 'outer;
            }
            let step = steps.len() + 1;
            let batch: Vec<&(TokenSeq, TraitId)> =
                chunk.iter().map(|&i| &seqs[i]).filter(|(s, _)| s.masked_count() > 0).collect();
            if batch.is_empty() {
                return Err(Error::DegenerateBatch(format!("step {step}: no discloser tokens in batch")));
            }
            let (breakdown, mut grads) = batch_gradients(model, &batch, cfg)?;
            let lm = breakdown.lm_loss;
            let record = StepRecord {
                step,
                lm,
                psl: breakdown.psl,
                aux: breakdown.aux.unwrap_or(0.0),
                total: breakdown.total,
                lr: cfg.learning_rate,
            };
            if !record.lm.is_finite() || !record.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at step {step}: lm {} psl {} aux {} total {}",
                    record.lm, record.psl, record.aux, record.total
                )));
            }
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
            }
            observer(&record, model)?;
            steps.push(record);

            if cfg.clip_grad_norm {
                clip_global_norm(&mut grads, 1.0);
            }
            let mut params = model.params_mut();
            adam.step(&mut params, &grads)?;
        }
    }

    if model.base_checksum() != checksum {
        return Err(Error::Training("base weights changed during training".into()));
    }
    let final_weighting = model.weighting_matrices()?.into_iter().map(|m| m.as_tensor().clone()).collect();
    Ok(RunReport {
        seed: cfg.seed,
        baseline: model.baseline(),
        steps,
        final_weighting,
        base_checksum: checksum,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn train(cfg: &TrainConfig, corpus: &[DialogueRecord], model: &mut Model) -> Result<RunReport> {
    train_with(cfg, corpus, model, None, &mut |_, _| Ok(()))
}

/// Builds a fresh model for `cfg.baseline` (seeded by `cfg.seed`) and
/// trains it.
pub fn run_baseline(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    corpus: &[DialogueRecord],
) -> Result<(Model, RunReport)> {
    let mut model = Model::new(model_cfg.clone(), cfg.baseline, cfg.seed)?;
    let report = train(cfg, corpus, &mut model)?;
    Ok((model, report))
}
