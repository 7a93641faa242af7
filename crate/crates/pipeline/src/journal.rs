//! Append-only record of finished pipeline work, replayed on resume.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use persona_core::corpus::DialogueRecord;
use persona_core::Dimension;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};
use crate::topics::Classification;
use crate::validate::ValidationVerdict;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthOutcome {
    Record(DialogueRecord),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Header { fingerprint: String },
    Extract { dimension: Dimension, index: usize, outcome: Classification },
    Synth { key: String, outcome: SynthOutcome },
    Validate { key: String, verdict: ValidationVerdict },
}

/// Journal contents indexed for lookup, plus the open file for appends.
/// Only the pipeline's coordinating thread writes.
pub struct Journal {
    path: PathBuf,
    file: File,
    pub extracted: HashMap<(Dimension, usize), Classification>,
    pub synthesized: HashMap<String, SynthOutcome>,
    pub validated: HashMap<String, ValidationVerdict>,
}

impl Journal {
    /// Opens (or starts) the journal at `path`. An existing journal must
    /// carry the same fingerprint. A torn final line from an interrupted
    /// write is discarded.
    pub fn open(path: &Path, fingerprint: &str) -> Result<Self> {
        let mut extracted = HashMap::new();
        let mut synthesized = HashMap::new();
        let mut validated = HashMap::new();
        let mut valid_len = 0usize;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let fresh = !path.exists();
        if !fresh {
            let text = std::fs::read_to_string(path)?;
            let mut header_seen = false;
            for line in text.split_inclusive('\n') {
                let entry: Entry = match serde_json::from_str(line.trim_end()) {
                    Ok(e) => e,
                    Err(_) if !line.ends_with('\n') => break,
                    Err(e) => return Err(PipelineError::Journal(format!("{}: {e}", path.display()))),
                };
                valid_len += line.len();
                match entry {
                    Entry::Header { fingerprint: f } => {
                        if f != fingerprint {
                            return Err(PipelineError::Journal(format!(
                                "{} belongs to a different configuration or source set",
                                path.display()
                            )));
                        }
                        header_seen = true;
                    }
                    _ if !header_seen => return Err(PipelineError::Journal("entry before header".into())),
                    Entry::Extract { dimension, index, outcome } => {
                        extracted.insert((dimension, index), outcome);
                    }
                    Entry::Synth { key, outcome } => {
                        synthesized.insert(key, outcome);
                    }
                    Entry::Validate { key, verdict } => {
                        validated.insert(key, verdict);
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).write(true).truncate(false).open(path)?;
        file.set_len(valid_len as u64)?;
        let file = OpenOptions::new().append(true).open(path)?;
        let mut j = Self { path: path.to_path_buf(), file, extracted, synthesized, validated };
        if fresh || valid_len == 0 {
            j.append(&Entry::Header { fingerprint: fingerprint.to_string() })?;
        }
        Ok(j)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, entry: &Entry) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        match entry {
            Entry::Header { .. } => {}
            Entry::Extract { dimension, index, outcome } => {
                self.extracted.insert((*dimension, *index), outcome.clone());
            }
            Entry::Synth { key, outcome } => {
                self.synthesized.insert(key.clone(), outcome.clone());
            }
            Entry::Validate { key, verdict } => {
                self.validated.insert(key.clone(), verdict.clone());
            }
        }
        Ok(())
    }
}
