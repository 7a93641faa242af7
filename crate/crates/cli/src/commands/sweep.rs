use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::{info, warn};
use persona_core::assessment::AggregateReport;
use serde::{Deserialize, Serialize};

use super::assess::{assess, evaluate, inventory_items, make_judge};
use super::train::{fit, held_out_lm, split_corpus, summarize, ModelArgs, OptimArgs, TrainSummary};
use super::{data_path, load_corpus};
use crate::config::{set, RunConfig};
use crate::manifest::RunRecorder;
use crate::usage;

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Expert counts, comma separated.
    #[arg(long = "n", id = "grid_n", value_delimiter = ',')]
    pub experts: Option<Vec<usize>>,
    /// Total ranks, comma separated.
    #[arg(long = "r", id = "grid_r", value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    /// Regularizer weights, comma separated.
    #[arg(long = "lambdas", value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Inventory repeats per cell.
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Worker processes running cells side by side.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Args, Debug)]
pub struct CellArgs {
    /// Cell description written by `sweep`.
    #[arg(long)]
    pub cell: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub experts: usize,
    pub rank: usize,
    pub lambda: f64,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub name: String,
    pub experts: usize,
    pub rank: usize,
    pub lambda: f64,
    pub train: TrainSummary,
    pub matching_wins: Option<usize>,
    pub aggregate: AggregateReport,
}

fn cell_name(n: usize, r: usize, lambda: f64) -> String {
    format!("n{n}-r{r}-lambda{lambda}")
}

/// Trains and assesses one grid point, writing its report under `out`.
fn run_cell(spec: &CellSpec, out: &Path) -> Result<CellReport> {
    let cfg = &spec.config;
    let data = cfg.data.path.clone().context("cell has no corpus")?;
    let records = load_corpus(&data)?;
    let (train_set, eval_set) = split_corpus(&records, cfg.data.eval_fraction, cfg.seed)?;
    let (model, run) = fit(cfg, &train_set, None).with_context(|| format!("sweep cell {}", spec.name))?;
    let eval_lm = held_out_lm(&model, &eval_set, cfg.train.max_len(), cfg.train.exec)?;
    let train = summarize(&model, &run, eval_lm)?;
    let matching_wins = if eval_set.is_empty() {
        None
    } else {
        Some(evaluate(&model, &eval_set, &cfg.train, cfg.train.exec)?.matching_wins)
    };
    let items = inventory_items(cfg)?;
    let judge = make_judge(cfg)?;
    let (_, _, aggregate) = assess(&model, cfg, &items, judge.as_ref())?;
    let report = CellReport {
        name: spec.name.clone(),
        experts: spec.experts,
        rank: spec.rank,
        lambda: spec.lambda,
        train,
        matching_wins,
        aggregate,
    };
    let mut rec = RunRecorder::start("sweep-cell", out)?;
    rec.write_json("report.json", &report)?;
    rec.write("aggregate.txt", report.aggregate.to_table())?;
    rec.finish(cfg)?;
    Ok(report)
}

pub fn sweep_cell(a: &CellArgs, out: &Path) -> Result<()> {
    let spec: CellSpec = serde_json::from_str(&std::fs::read_to_string(&a.cell)?).context("sweep: reading cell")?;
    run_cell(&spec, out)?;
    Ok(())
}

fn summary_text(reports: &[CellReport], skipped: &[(String, String)]) -> String {
    let mut s = format!(
        "{:<24} {:>4} {:>5} {:>8} {:>14} {:>14} {:>9} {:>9} {:>10} {:>9} {:>8}\n",
        "cell", "N", "r", "lambda", "adapter_params", "routing_params", "final_lm", "eval_lm", "gram_mean", "matching", "overall"
    );
    for c in reports {
        s.push_str(&format!(
            "{:<24} {:>4} {:>5} {:>8} {:>14} {:>14} {:>9.4} {:>9} {:>10} {:>9} {:>8.3}\n",
            c.name,
            c.experts,
            c.rank,
            c.lambda,
            c.train.adapter_params,
            c.train.routing_params,
            c.train.final_lm,
            c.train.eval_lm.map_or("-".into(), |v| format!("{v:.4}")),
            c.train.gram_off_diag_mean.map_or("-".into(), |v| format!("{v:.4}")),
            c.matching_wins.map_or("-".into(), |w| format!("{w}/10")),
            c.aggregate.overall
        ));
    }
    for (name, why) in skipped {
        s.push_str(&format!("skipped {name}: {why}\n"));
    }
    s
}

fn wait(name: &str, mut child: Child) -> Result<()> {
    let status = child.wait()?;
    if !status.success() {
        bail!("sweep: worker for cell {name} failed with {status}");
    }
    Ok(())
}

pub fn sweep(cfg: &mut RunConfig, a: &SweepArgs, out: &Path) -> Result<()> {
    a.model.apply(cfg);
    a.optim.apply(cfg);
    cfg.train.seed = cfg.seed;
    let s = &mut cfg.sweep;
    set(&mut s.experts, a.experts.clone());
    set(&mut s.ranks, a.ranks.clone());
    set(&mut s.lambdas, a.lambdas.clone());
    set(&mut s.repeats, a.repeats);
    set(&mut s.jobs, a.jobs);
    if a.optim.max_steps.is_some() {
        s.max_steps = a.optim.max_steps;
    }
    if s.experts.is_empty() || s.ranks.is_empty() || s.lambdas.is_empty() {
        return Err(usage("sweep needs at least one value on every axis"));
    }
    if s.jobs == 0 || s.repeats == 0 {
        return Err(usage("--jobs and --repeats must be at least 1"));
    }
    data_path(cfg, a.optim.data.as_ref(), "sweep")?;

    let mut rec = RunRecorder::start("sweep", out)?;
    let mut specs = Vec::new();
    let mut skipped = Vec::new();
    for &r in &cfg.sweep.ranks {
        for &n in &cfg.sweep.experts {
            for &lambda in &cfg.sweep.lambdas {
                let name = cell_name(n, r, lambda);
                let mut c = cfg.clone();
                c.model.adapter.num_experts = n;
                c.model.adapter.total_rank = r;
                c.train.lambda = lambda;
                c.train.max_steps = cfg.sweep.max_steps;
                c.inventory.repeats = cfg.sweep.repeats;
                if let Err(e) = c.model.validate() {
                    warn!("skipping {name}: {e}");
                    skipped.push((name, e.to_string()));
                    continue;
                }
                specs.push(CellSpec { name, experts: n, rank: r, lambda, config: c });
            }
        }
    }

    let mut reports = Vec::new();
    if cfg.sweep.jobs == 1 {
        for spec in &specs {
            info!("sweep cell {}", spec.name);
            reports.push(run_cell(spec, &rec.dir().join(&spec.name))?);
        }
    } else {
        let exe = std::env::current_exe().context("sweep: locating the persona binary")?;
        for chunk in specs.chunks(cfg.sweep.jobs) {
            let mut children = Vec::new();
            for spec in chunk {
                let dir = rec.dir().join(&spec.name);
                std::fs::create_dir_all(&dir)?;
                let cell_file = dir.join("cell.json");
                std::fs::write(&cell_file, serde_json::to_string_pretty(spec)?)?;
                let child = Command::new(&exe)
                    .arg("sweep-cell")
                    .arg("--cell")
                    .arg(&cell_file)
                    .arg("--out")
                    .arg(&dir)
                    .spawn()
                    .with_context(|| format!("sweep: starting worker for {}", spec.name))?;
                children.push((spec.name.clone(), child));
            }
            for (name, child) in children {
                wait(&name, child)?;
            }
        }
        for spec in &specs {
            let p = rec.dir().join(&spec.name).join("report.json");
            reports.push(serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("reading {}", p.display()))?);
        }
    }
    for spec in &specs {
        rec.output(&format!("{}/report.json", spec.name));
    }
    let text = summary_text(&reports, &skipped);
    rec.write_json("summary.json", &serde_json::json!({ "cells": reports, "skipped": skipped }))?;
    rec.write("summary.txt", &text)?;
    print!("{text}");
    rec.finish(cfg)?;
    Ok(())
}
