use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use persona_core::assessment::{
    administer, aggregate, compare, export_router_weights, load_inventory, score, standard_inventory, AggregateReport,
    ChatJudge, InventoryItem, LikertJudge, ModelSubject, ScoredItem, StyleJudge, Transcript,
};
use persona_core::checkpoint::{load_checkpoint, Manifest, MANIFEST_FILE};
use persona_core::corpus::{DialogueRecord, StyleSpec};
use persona_core::eval::{cross_entropy_matrix, CeMatrix};
use persona_core::model::Model;
use persona_core::par::ExecMode;
use persona_core::trainer::TrainConfig;
use persona_core::TraitId;
use persona_pipeline::{HttpChatClient, MockScript};
use serde::{Deserialize, Serialize};

use super::load_corpus;
use crate::config::{set, JudgeKind, RunConfig};
use crate::manifest::RunRecorder;
use crate::usage;

#[derive(Args, Debug, Clone, Default)]
pub struct CheckpointArgs {
    /// Checkpoint directory, or a training run directory holding one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Checkpoint directory plus the run directory it sits in, if any.
fn checkpoint_dirs(cfg: &mut RunConfig, a: &CheckpointArgs, cmd: &str) -> Result<(PathBuf, Option<PathBuf>)> {
    if let Some(p) = &a.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    let p = cfg.checkpoint.clone().ok_or_else(|| usage(format!("{cmd} needs --checkpoint or checkpoint in the config")))?;
    let nested = p.join("checkpoint");
    if nested.join(MANIFEST_FILE).exists() {
        Ok((nested, Some(p)))
    } else {
        Ok((p, None))
    }
}

fn open_checkpoint(dir: &Path) -> Result<(Model, Manifest)> {
    load_checkpoint(dir, None).with_context(|| format!("checkpoint: loading {}", dir.display()))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// Held-out dialogues [default: eval.jsonl of the training run].
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = super::train::parse_exec)]
    pub exec: Option<ExecMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub matrix: CeMatrix,
    /// Traits whose condition scores its own text below the mean of the others.
    pub matching_wins: usize,
    pub column_wins: usize,
    pub traits: usize,
}

pub fn evaluate(model: &Model, eval: &[DialogueRecord], train: &TrainConfig, exec: ExecMode) -> Result<EvalSummary> {
    let matrix = cross_entropy_matrix(model, eval, train.max_len(), exec).context("eval: cross-entropy matrix")?;
    Ok(EvalSummary {
        matching_wins: matrix.row_wins().iter().filter(|&&w| w).count(),
        column_wins: matrix.column_wins().iter().filter(|&&w| w).count(),
        traits: matrix.traits.len(),
        matrix,
    })
}

pub fn eval_lm(cfg: &mut RunConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    set(&mut cfg.train.exec, a.exec);
    let (ckpt, run_dir) = checkpoint_dirs(cfg, &a.ckpt, "eval-lm")?;
    let data = match (&a.data, run_dir.as_ref().map(|r| r.join("eval.jsonl")).filter(|p| p.exists())) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p,
        (None, None) => cfg.data.path.clone().ok_or_else(|| usage("eval-lm needs --data"))?,
    };
    cfg.data.path = Some(data.clone());
    let (model, manifest) = open_checkpoint(&ckpt)?;
    let train = manifest.train.unwrap_or_default();
    let eval = load_corpus(&data)?;
    let summary = evaluate(&model, &eval, &train, cfg.train.exec)?;
    let mut rec = RunRecorder::start("eval-lm", out)?;
    rec.write_json("ce_matrix.json", &summary)?;
    let text = format!(
        "{}matching-trait wins (rows): {}/{}\nmatching-trait wins (columns): {}/{}\n",
        summary.matrix.to_table(),
        summary.matching_wins,
        summary.traits,
        summary.column_wins,
        summary.traits
    );
    rec.write("ce_matrix.txt", &text)?;
    print!("{text}");
    rec.finish(cfg)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct InventoryArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// JSON item list [default: built-in prompts].
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// style (synthetic corpora) or chat (an endpoint from the pipeline config).
    #[arg(long, value_parser = parse_judge)]
    pub judge: Option<JudgeKind>,
    /// Offline chat script for the chat judge.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    /// Aggregate report of a reference model to test against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long)]
    pub style_seed: Option<u64>,
    #[arg(long, value_parser = super::train::parse_exec)]
    pub exec: Option<ExecMode>,
}

fn parse_judge(s: &str) -> Result<JudgeKind, String> {
    match s {
        "style" => Ok(JudgeKind::Style),
        "chat" => Ok(JudgeKind::Chat),
        _ => Err(format!("expected style or chat, got {s:?}")),
    }
}

pub fn inventory_items(cfg: &RunConfig) -> Result<Vec<InventoryItem>> {
    match &cfg.inventory.items {
        Some(p) => load_inventory(p).with_context(|| format!("assessment: loading items {}", p.display())),
        None => Ok(standard_inventory()),
    }
}

pub fn make_judge(cfg: &RunConfig) -> Result<Box<dyn LikertJudge>> {
    Ok(match cfg.inventory.judge {
        JudgeKind::Style => Box::new(StyleJudge::new(StyleSpec::standard(cfg.data.style_seed))),
        JudgeKind::Chat => match &cfg.inventory.mock {
            Some(m) => Box::new(ChatJudge::new(MockScript::load(m)?.into_client())),
            None => {
                let p = &cfg.pipeline;
                Box::new(ChatJudge::new(HttpChatClient::new(&p.endpoint, &p.model, Some(&p.api_key_env))))
            }
        },
    })
}

/// Administers every item to every trait condition and aggregates.
pub fn assess(
    model: &Model,
    cfg: &RunConfig,
    items: &[InventoryItem],
    judge: &dyn LikertJudge,
) -> Result<(Vec<Transcript>, Vec<ScoredItem>, AggregateReport)> {
    let inv = &cfg.inventory;
    let subject = ModelSubject { model, max_new: inv.max_new, temperature: inv.temperature };
    let mut transcripts = Vec::new();
    for t in TraitId::all() {
        transcripts.extend(
            administer(&subject, items, t, inv.repeats, cfg.seed ^ t.index() as u64, cfg.train.exec)
                .with_context(|| format!("assessment: administering to {t}"))?,
        );
    }
    let scored = score(&transcripts, items, judge).context("assessment: scoring")?;
    let report = aggregate(&scored).context("assessment: aggregating")?;
    Ok((transcripts, scored, report))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn inventory(cfg: &mut RunConfig, a: &InventoryArgs, out: &Path) -> Result<()> {
    let inv = &mut cfg.inventory;
    if a.items.is_some() {
        inv.items = a.items.clone();
    }
    set(&mut inv.repeats, a.repeats);
    set(&mut inv.max_new, a.max_new);
    set(&mut inv.temperature, a.temperature);
    set(&mut inv.judge, a.judge.clone());
    if a.mock.is_some() {
        inv.mock = a.mock.clone();
    }
    if a.compare.is_some() {
        inv.compare = a.compare.clone();
    }
    set(&mut cfg.data.style_seed, a.style_seed);
    set(&mut cfg.train.exec, a.exec);
    if cfg.inventory.repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    let (ckpt, _) = checkpoint_dirs(cfg, &a.ckpt, "inventory")?;
    let (model, _) = open_checkpoint(&ckpt)?;
    let items = inventory_items(cfg)?;
    let judge = make_judge(cfg)?;
    let (transcripts, scored, report) = assess(&model, cfg, &items, judge.as_ref())?;

    let mut rec = RunRecorder::start("inventory", out)?;
    rec.write("transcripts.jsonl", jsonl(&transcripts)?)?;
    rec.write("scores.jsonl", jsonl(&scored)?)?;
    rec.write_json("aggregate.json", &report)?;
    let mut text = report.to_table();
    if let Some(path) = &cfg.inventory.compare {
        let reference: AggregateReport = serde_json::from_str(
            &std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("assessment: {} is not an aggregate report", path.display()))?;
        let cmp = compare(&report, &reference);
        rec.write_json("comparison.json", &cmp)?;
        text.push_str("\nWelch p-values against the reference:\n");
        for (t, p) in &cmp.p_values {
            text.push_str(&format!("{:<4} {}\n", t.code(), p.map_or("n/a".to_string(), |p| format!("{p:.4}"))));
        }
    }
    rec.write("aggregate.txt", &text)?;
    print!("{text}");
    rec.finish(cfg)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
}

pub fn router_export(cfg: &mut RunConfig, a: &ExportArgs, out: &Path) -> Result<()> {
    let (ckpt, _) = checkpoint_dirs(cfg, &a.ckpt, "router-export")?;
    let (model, _) = open_checkpoint(&ckpt)?;
    let export = export_router_weights(&model).context("assessment: exporting router weights")?;
    let mut rec = RunRecorder::start("router-export", out)?;
    rec.write_json("router.json", &export)?;
    rec.write("router.csv", export.to_csv())?;
    let mut text = String::from("layer  gram_off_diag_mean  gram_off_diag_max  top1\n");
    for l in &export.layers {
        let top: Vec<String> = l
            .rows
            .iter()
            .map(|r| {
                let j = r.weights.iter().enumerate().fold(0, |b, (i, w)| if *w > r.weights[b] { i } else { b });
                format!("{}:{j}", r.trait_id.code())
            })
            .collect();
        text.push_str(&format!(
            "{:<6} {:>18.6} {:>18.6}  {}\n",
            l.layer,
            l.gram_off_diag_mean,
            l.gram_off_diag_max,
            top.join(" ")
        ));
    }
    rec.write("router.txt", &text)?;
    print!("{text}");
    rec.finish(cfg)?;
    Ok(())
}
