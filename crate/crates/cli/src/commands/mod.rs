pub mod assess;
pub mod data;
pub mod pipeline;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use persona_core::corpus::{load_dialogues_strict, DialogueRecord};

use crate::config::RunConfig;
use crate::usage;

/// Corpus named by the flag, else by the config.
pub fn data_path(cfg: &mut RunConfig, flag: Option<&PathBuf>, cmd: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        cfg.data.path = Some(p.clone());
    }
    cfg.data.path.clone().ok_or_else(|| usage(format!("{cmd} needs --data or data.path in the config")))
}

pub fn load_corpus(path: &Path) -> Result<Vec<DialogueRecord>> {
    load_dialogues_strict(path).with_context(|| format!("corpus: loading {}", path.display()))
}

/// Refuses output directories that would overwrite an input file.
pub fn guard_inputs(out: &Path, inputs: &[&Path]) -> Result<()> {
    for input in inputs {
        if input.parent().is_some_and(|p| p == out) && is_run_output(input) {
            return Err(usage(format!("--out {} would overwrite input {}", out.display(), input.display())));
        }
    }
    Ok(())
}

fn is_run_output(p: &Path) -> bool {
    matches!(
        p.file_name().and_then(|n| n.to_str()),
        Some("dialogues.jsonl" | "train.jsonl" | "eval.jsonl" | "report.json" | "run_manifest.json")
    )
}
