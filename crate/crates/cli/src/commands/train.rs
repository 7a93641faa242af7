use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use persona_core::checkpoint::save_checkpoint;
use persona_core::corpus::{split, write_dialogues, DialogueRecord};
use persona_core::model::{Baseline, Model};
use persona_core::objectives::RegularizerMode;
use persona_core::par::ExecMode;
use persona_core::tokenizer::TokenSeq;
use persona_core::trainer::{batch_lm_loss, train_with, RunReport};
use persona_core::TraitId;
use serde::{Deserialize, Serialize};

use super::{data_path, guard_inputs, load_corpus};
use crate::config::{set, RunConfig};
use crate::manifest::RunRecorder;
use crate::usage;

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Experts per adapted matrix.
    #[arg(long)]
    pub experts: Option<usize>,
    /// Total adapter rank, shared by the experts.
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Seed of the frozen backbone.
    #[arg(long)]
    pub base_seed: Option<u64>,
}

impl ModelArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.model.adapter.num_experts, self.experts);
        set(&mut cfg.model.adapter.total_rank, self.rank);
        set(&mut cfg.model.adapter.alpha, self.alpha);
        set(&mut cfg.model.base_seed, self.base_seed);
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct OptimArgs {
    /// Dialogue corpus (JSON lines).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// moe, single_lora or per_trait_lora.
    #[arg(long, value_parser = parse_baseline)]
    pub baseline: Option<Baseline>,
    /// Regularizer: psl, aux or none.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RegularizerMode>,
    /// Regularizer weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Held-out share of every trait (0 trains on everything).
    #[arg(long)]
    pub eval_fraction: Option<f64>,
    /// sequential or parallel batch execution.
    #[arg(long, value_parser = parse_exec)]
    pub exec: Option<ExecMode>,
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    s.parse().map_err(|e: persona_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<RegularizerMode, String> {
    s.parse().map_err(|e: persona_core::Error| e.to_string())
}

pub fn parse_exec(s: &str) -> Result<ExecMode, String> {
    match s {
        "sequential" => Ok(ExecMode::Sequential),
        "parallel" => Ok(ExecMode::Parallel),
        _ => Err(format!("expected sequential or parallel, got {s:?}")),
    }
}

impl OptimArgs {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.train.baseline, self.baseline);
        set(&mut cfg.train.mode, self.mode);
        set(&mut cfg.train.lambda, self.lambda);
        set(&mut cfg.train.learning_rate, self.lr);
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.batch_size, self.batch_size);
        if self.max_steps.is_some() {
            cfg.train.max_steps = self.max_steps;
        }
        set(&mut cfg.data.eval_fraction, self.eval_fraction);
        set(&mut cfg.train.exec, self.exec);
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub baseline: Baseline,
    pub steps: usize,
    pub final_lm: f64,
    pub final_psl: f64,
    pub final_aux: f64,
    pub final_total: f64,
    /// Mean masked cross-entropy of the held-out split under each
    /// dialogue's own trait.
    pub eval_lm: Option<f64>,
    pub adapter_params: usize,
    pub routing_params: usize,
    /// Mean off-diagonal Gram entry of the final weighting matrices.
    pub gram_off_diag_mean: Option<f64>,
    pub base_checksum: String,
    pub wall_clock_secs: f64,
}

impl TrainSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "baseline          {}\nsteps             {}\nfinal lm loss     {:.6}\nfinal psl         {:.6}\nfinal aux         {:.6}\nfinal total       {:.6}\n",
            self.baseline, self.steps, self.final_lm, self.final_psl, self.final_aux, self.final_total
        );
        if let Some(e) = self.eval_lm {
            s.push_str(&format!("held-out lm loss  {e:.6}\n"));
        }
        if let Some(g) = self.gram_off_diag_mean {
            s.push_str(&format!("gram off-diag     {g:.6}\n"));
        }
        s.push_str(&format!(
            "adapter params    {}\nrouting params    {}\nbase checksum     {}\n",
            self.adapter_params, self.routing_params, self.base_checksum
        ));
        s
    }
}

/// Train/eval split, or everything for training when the fraction is 0.
pub fn split_corpus(records: &[DialogueRecord], fraction: f64, seed: u64) -> Result<(Vec<DialogueRecord>, Vec<DialogueRecord>)> {
    if fraction == 0.0 {
        return Ok((records.to_vec(), Vec::new()));
    }
    split(records, fraction, seed).context("corpus: splitting")
}

pub fn held_out_lm(model: &Model, eval: &[DialogueRecord], max_len: usize, exec: ExecMode) -> Result<Option<f64>> {
    let seqs: Vec<(TokenSeq, TraitId)> = eval
        .iter()
        .map(|r| (model.prepare(r, r.trait_id, max_len), r.trait_id))
        .filter(|(s, _)| s.masked_count() > 0)
        .collect();
    if seqs.is_empty() {
        return Ok(None);
    }
    Ok(Some(batch_lm_loss(model, &seqs, exec).context("trainer: held-out loss")?))
}

pub fn summarize(model: &Model, report: &RunReport, eval_lm: Option<f64>) -> Result<TrainSummary> {
    let last = report.steps.last().ok_or_else(|| anyhow::anyhow!("trainer: no steps were taken"))?;
    let (adapter_params, routing_params) = model.trainable_counts();
    let grams: Vec<f64> = model.weighting_matrices()?.iter().map(|m| m.gram_off_diagonal_stats().0).collect();
    Ok(TrainSummary {
        baseline: report.baseline,
        steps: report.steps.len(),
        final_lm: last.lm,
        final_psl: last.psl,
        final_aux: last.aux,
        final_total: last.total,
        eval_lm,
        adapter_params,
        routing_params,
        gram_off_diag_mean: (!grams.is_empty()).then(|| grams.iter().sum::<f64>() / grams.len() as f64),
        base_checksum: report.base_checksum.clone(),
        wall_clock_secs: report.wall_clock_secs,
    })
}

/// Builds and trains a model from the resolved config; `log` gets the
/// per-step JSON lines.
pub fn fit(cfg: &RunConfig, train_set: &[DialogueRecord], log: Option<&mut dyn Write>) -> Result<(Model, RunReport)> {
    let mut model = Model::new(cfg.model.clone(), cfg.train.baseline, cfg.seed).context("model: building")?;
    let report = train_with(&cfg.train, train_set, &mut model, log, &mut |_, _| Ok(())).context("trainer: training")?;
    Ok((model, report))
}

pub fn train(cfg: &mut RunConfig, a: &TrainArgs, out: &Path) -> Result<()> {
    a.model.apply(cfg);
    a.optim.apply(cfg);
    cfg.train.seed = cfg.seed;
    if !(0.0..1.0).contains(&cfg.data.eval_fraction) {
        return Err(usage(format!("--eval-fraction must be in [0, 1), got {}", cfg.data.eval_fraction)));
    }
    let data = data_path(cfg, a.optim.data.as_ref(), "train")?;
    guard_inputs(out, &[&data])?;
    let records = load_corpus(&data)?;
    let (train_set, eval_set) = split_corpus(&records, cfg.data.eval_fraction, cfg.seed)?;

    let mut rec = RunRecorder::start("train", out)?;
    let log_path = rec.output("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let (model, report) = fit(cfg, &train_set, Some(&mut log))?;
    log.flush()?;
    let ckpt = rec.output("checkpoint");
    save_checkpoint(&model, Some(&cfg.train), &ckpt).context("checkpoint: saving")?;
    write_dialogues(&rec.output("train.jsonl"), &train_set)?;
    if !eval_set.is_empty() {
        write_dialogues(&rec.output("eval.jsonl"), &eval_set)?;
    }
    let eval_lm = held_out_lm(&model, &eval_set, cfg.train.max_len(), cfg.train.exec)?;
    let summary = summarize(&model, &report, eval_lm)?;
    rec.write_json("report.json", &serde_json::json!({ "summary": summary, "run": report }))?;
    rec.write("report.txt", summary.to_text())?;
    print!("{}", summary.to_text());
    rec.finish(cfg)?;
    Ok(())
}
