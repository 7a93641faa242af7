//! One manifest per artifact-producing run.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Fully resolved configuration; `--config` accepts this file as is.
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Crate version plus `git describe` of the working tree when available.
pub fn version_string() -> String {
    let git = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match git {
        Some(g) if !g.is_empty() => format!("{} ({g})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Collects outputs while a run executes and writes the manifest at the end.
pub struct RunRecorder {
    subcommand: String,
    out: PathBuf,
    started: u64,
    outputs: Vec<PathBuf>,
}

impl RunRecorder {
    pub fn start(subcommand: &str, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
        Ok(Self { subcommand: subcommand.to_string(), out: out.to_path_buf(), started: now(), outputs: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.out
    }

    /// Path of an output file inside the run directory, recorded.
    pub fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.output(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    pub fn finish(self, config: &RunConfig) -> Result<RunManifest> {
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config: config.clone(),
            seed: config.seed,
            version: version_string(),
            started_unix: self.started,
            finished_unix: now(),
            outputs: self.outputs,
        };
        let p = self.out.join(MANIFEST_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
        Ok(manifest)
    }
}
