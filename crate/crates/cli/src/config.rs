//! Run configuration: built-in defaults, overridden by a JSON config file,
//! overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use persona_core::model::ModelConfig;
use persona_core::trainer::TrainConfig;
use persona_pipeline::PipelineConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dialogue corpus used by `train`, `eval-lm` and `sweep`.
    pub path: Option<PathBuf>,
    /// Dialogues per trait written by `synth-data`.
    pub per_trait: usize,
    /// Seed of the synthetic trait styles (shared by data and judge).
    pub style_seed: u64,
    /// Held-out share of every trait, split off before training.
    pub eval_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, per_trait: 200, style_seed: 1, eval_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeKind {
    Style,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InventoryConfig {
    /// JSON item list; the built-in prompts when absent.
    pub items: Option<PathBuf>,
    pub repeats: usize,
    pub max_new: usize,
    pub temperature: f64,
    pub judge: JudgeKind,
    /// Aggregate report of a reference model to test against.
    pub compare: Option<PathBuf>,
    /// Offline chat script for the chat judge.
    pub mock: Option<PathBuf>,
}

impl Default for InventoryConfig {
    fn default() -> Self {
        Self { items: None, repeats: 5, max_new: 64, temperature: 1.0, judge: JudgeKind::Style, compare: None, mock: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub experts: Vec<usize>,
    pub ranks: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Optimizer steps per cell; a full run when absent.
    pub max_steps: Option<usize>,
    /// Inventory repeats per cell.
    pub repeats: usize,
    /// Worker processes; cells run one after another with 1.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            experts: vec![1, 2, 4, 8, 16, 32],
            ranks: vec![64],
            lambdas: vec![0.001, 0.005, 0.01, 0.05, 0.1, 0.5],
            max_steps: Some(30),
            repeats: 2,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Drives corpus synthesis, the train/eval split, training and
    /// sampling. The frozen backbone has its own `model.base_seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Checkpoint (or training run directory) read by evaluation commands.
    pub checkpoint: Option<PathBuf>,
    pub inventory: InventoryConfig,
    pub sweep: SweepConfig,
    pub pipeline: PipelineConfig,
}


impl RunConfig {
    /// Reads a config file. A run manifest is accepted too, in which case
    /// the configuration it recorded is used.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if v.get("subcommand").is_some() {
            if let Some(cfg) = v.get_mut("config") {
                v = cfg.take();
            }
        }
        serde_json::from_value(v).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Overwrites `dst` when the flag was given.
pub fn set<T>(dst: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *dst = v;
    }
}
