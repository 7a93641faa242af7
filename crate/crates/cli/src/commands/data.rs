use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use persona_core::corpus::{corpus_stats, load_dialogues, synth_corpus, write_dialogues, StyleSpec};

use crate::config::{set, RunConfig};
use crate::manifest::RunRecorder;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Dialogues per trait.
    #[arg(long)]
    pub per_trait: Option<usize>,
    /// Seed of the trait styles.
    #[arg(long)]
    pub style_seed: Option<u64>,
}

pub fn synth_data(cfg: &mut RunConfig, a: &SynthArgs, out: &Path) -> Result<()> {
    set(&mut cfg.data.per_trait, a.per_trait);
    set(&mut cfg.data.style_seed, a.style_seed);
    let spec = StyleSpec::standard(cfg.data.style_seed);
    let records = synth_corpus(&spec, cfg.data.per_trait, cfg.seed).context("corpus: synthesizing")?;
    let mut rec = RunRecorder::start("synth-data", out)?;
    let path = rec.output("dialogues.jsonl");
    write_dialogues(&path, &records).context("corpus: writing dialogues")?;
    rec.write_json("styles.json", &spec)?;
    let stats = corpus_stats(&records)?;
    rec.write("stats.txt", stats.to_table())?;
    println!("wrote {} dialogues to {}", records.len(), path.display());
    rec.finish(cfg)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Dialogue corpus (JSON lines).
    pub data: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

/// Prints corpus statistics. Malformed lines are reported and skipped.
/// Writes files only when `--out` is given.
pub fn stats(cfg: &RunConfig, a: &StatsArgs, out: Option<&Path>) -> Result<()> {
    let loaded = load_dialogues(&a.data).with_context(|| format!("corpus: loading {}", a.data.display()))?;
    for e in &loaded.errors {
        eprintln!("{}:{}: skipped: {}", a.data.display(), e.line, e.message);
    }
    let stats = corpus_stats(&loaded.records).context("corpus: statistics")?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{}", stats.to_table());
    }
    if let Some(out) = out {
        let mut cfg = cfg.clone();
        cfg.data.path = Some(a.data.clone());
        let mut rec = RunRecorder::start("stats", out)?;
        rec.write_json("stats.json", &stats)?;
        rec.write("stats.txt", stats.to_table())?;
        rec.finish(&cfg)?;
    }
    Ok(())
}
