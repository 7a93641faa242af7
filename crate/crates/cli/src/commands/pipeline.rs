use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use persona_core::chat::ChatClient;
use persona_core::corpus::write_dialogues;
use persona_pipeline::{apply_manual_verdicts, load_manual_verdicts, run_pipeline, HttpChatClient, MockScript, PipelineReport};

use super::{guard_inputs, load_corpus};
use crate::config::{set, RunConfig};
use crate::manifest::RunRecorder;

#[derive(Subcommand, Debug)]
pub enum PipelineCommand {
    /// Extract topics, synthesize dialogues and validate them. Rerunning
    /// with the same --out resumes from the journal.
    Run(RunArgs),
    /// Filter a dataset with annotator verdicts.
    ApplyVerdicts(VerdictArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// JSON lines of {"source_ref", "text"}.
    #[arg(long)]
    pub sources: Option<PathBuf>,
    /// Dialogues wanted per trait.
    #[arg(long)]
    pub quota: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// API root of a chat-completions endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Answer from an offline script instead of the endpoint.
    #[arg(long)]
    pub mock: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerdictArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON lines of {"record": <sha256>, "detected": [...], "reason"}.
    #[arg(long)]
    pub verdicts: PathBuf,
}

pub fn report_text(r: &PipelineReport) -> String {
    let mut s = format!(
        "sentences      {}\nextraction     {} attempted, {} kept, {} dropped\nsynthesis      {} attempted, {} kept, {} dropped\nvalidation     {} attempted, {} passed, {} failed ({:.1}%)\nrecords        {}\n\n{:<6} {:>6} {:>7} {:>9}\n",
        r.sentences,
        r.extraction.attempted,
        r.extraction.kept,
        r.extraction.dropped,
        r.synthesis.attempted,
        r.synthesis.kept,
        r.synthesis.dropped,
        r.validation.attempted,
        r.validation.passed,
        r.validation.failed,
        r.validation.pass_rate,
        r.records,
        "trait",
        "quota",
        "topics",
        "produced"
    );
    for c in &r.per_trait {
        s.push_str(&format!("{:<6} {:>6} {:>7} {:>9}\n", c.trait_id.code(), c.quota, c.topics, c.produced));
    }
    for w in &r.warnings {
        s.push_str(&format!("warning: {w}\n"));
    }
    s
}

pub fn run(cfg: &mut RunConfig, cmd: &PipelineCommand, out: &Path) -> Result<()> {
    match cmd {
        PipelineCommand::Run(a) => run_stages(cfg, a, out),
        PipelineCommand::ApplyVerdicts(a) => apply_verdicts(cfg, a, out),
    }
}

fn run_stages(cfg: &mut RunConfig, a: &RunArgs, out: &Path) -> Result<()> {
    let p = &mut cfg.pipeline;
    set(&mut p.sources, a.sources.clone());
    set(&mut p.quota_per_trait, a.quota);
    set(&mut p.parallelism, a.parallelism);
    set(&mut p.endpoint, a.endpoint.clone());
    set(&mut p.model, a.model.clone());
    guard_inputs(out, &[&p.sources])?;
    let mut rec = RunRecorder::start("pipeline run", out)?;
    p.output = rec.output("dialogues.jsonl");
    p.report = Some(rec.output("pipeline_report.json"));
    p.journal = Some(rec.output("journal.jsonl"));
    let client: Box<dyn ChatClient> = match &a.mock {
        Some(m) => Box::new(MockScript::load(m).context("pipeline: loading mock script")?.into_client()),
        None => Box::new(HttpChatClient::new(&p.endpoint, &p.model, Some(&p.api_key_env))),
    };
    let report = run_pipeline(p, client.as_ref()).context("pipeline: run failed")?;
    let text = report_text(&report);
    rec.write("pipeline_report.txt", &text)?;
    print!("{text}");
    rec.finish(cfg)?;
    Ok(())
}

fn apply_verdicts(cfg: &mut RunConfig, a: &VerdictArgs, out: &Path) -> Result<()> {
    guard_inputs(out, &[&a.data, &a.verdicts])?;
    let records = load_corpus(&a.data)?;
    let entries = load_manual_verdicts(&a.verdicts).context("pipeline: loading verdicts")?;
    let (kept, verdicts, summary) = apply_manual_verdicts(&records, &entries);
    cfg.data.path = Some(a.data.clone());
    let mut rec = RunRecorder::start("pipeline apply-verdicts", out)?;
    write_dialogues(&rec.output("dialogues.jsonl"), &kept)?;
    rec.write_json("manual_report.json", &serde_json::json!({ "summary": summary, "verdicts": verdicts }))?;
    println!(
        "reviewed {}, passed {} ({:.1}%), unreviewed {}, kept {}",
        summary.reviewed,
        summary.passed,
        summary.pass_rate,
        summary.unreviewed,
        kept.len()
    );
    rec.finish(cfg)?;
    Ok(())
}
