//! Back validation: an automatic judge pass and imported manual verdicts.

use std::collections::BTreeSet;
use std::path::Path;

use persona_core::chat::{ChatClient, DecodeParams};
use persona_core::corpus::DialogueRecord;
use persona_core::Dimension;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::render_dialogue;
use crate::error::{PipelineError, Result};
use crate::prompts::{validation_user, VALIDATION_SYSTEM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub stage: Stage,
    /// True exactly when the record's dimension was detected.
    pub passed: bool,
    pub detected_traits: Vec<Dimension>,
    pub reason: String,
}

impl ValidationVerdict {
    pub fn new(stage: Stage, record: &DialogueRecord, detected: Vec<Dimension>, reason: String) -> Self {
        let passed = detected.contains(&record.trait_id.dimension);
        Self { stage, passed, detected_traits: detected, reason }
    }
}

/// Dimensions named on the last `Result:` line, in order of first mention.
pub fn parse_result_line(reply: &str) -> Option<Vec<Dimension>> {
    let line = reply.lines().rev().find_map(|l| {
        let t = l.trim().trim_start_matches(['*', '#', ' ']);
        let lower = t.to_lowercase();
        lower.starts_with("result").then(|| t.split_once(':').map(|(_, rest)| rest.to_string())).flatten()
    })?;
    let mut out = Vec::new();
    for part in line.split([',', ';', '/']).flat_map(|p| p.split(" and ")) {
        let word = part.trim().trim_matches(|c: char| !c.is_alphabetic());
        if let Some(d) = Dimension::from_name(word) {
            if !out.contains(&d) {
                out.push(d);
            }
        }
    }
    (!out.is_empty()).then_some(out)
}

/// Asks the judge which dimensions the discloser shows.
pub fn auto_validate(
    record: &DialogueRecord,
    client: &dyn ChatClient,
    params: &DecodeParams,
) -> persona_core::Result<ValidationVerdict> {
    record.validate().map_err(persona_core::Error::Corpus)?;
    let reply = client.complete(VALIDATION_SYSTEM, &validation_user(&render_dialogue(record)), params)?;
    Ok(match parse_result_line(&reply) {
        Some(detected) => {
            let reason = if detected.contains(&record.trait_id.dimension) {
                format!("detected {}", record.trait_id.dimension.name())
            } else {
                let names: Vec<&str> = detected.iter().map(|d| d.name()).collect();
                format!("detected {} instead of {}", names.join(", "), record.trait_id.dimension.name())
            };
            ValidationVerdict::new(Stage::Auto, record, detected, reason)
        }
        None => ValidationVerdict { stage: Stage::Auto, passed: false, detected_traits: Vec::new(), reason: "unparseable".into() },
    })
}

/// Pass rate as a percentage; zero when nothing was attempted.
pub fn pass_rate(passed: usize, attempted: usize) -> f64 {
    if attempted == 0 {
        0.0
    } else {
        100.0 * passed as f64 / attempted as f64
    }
}

/// Content key of a record: SHA-256 of its JSON line.
pub fn record_key(record: &DialogueRecord) -> String {
    let line = serde_json::to_string(record).expect("records serialize");
    Sha256::digest(line.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// One annotator decision from a verdict file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManualEntry {
    pub record: String,
    pub detected: Vec<Dimension>,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualSummary {
    pub reviewed: usize,
    pub passed: usize,
    pub unreviewed: usize,
    pub pass_rate: f64,
}

/// Reads a JSON-lines verdict file keyed by [`record_key`].
pub fn load_manual_verdicts(path: &Path) -> Result<Vec<ManualEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let e: ManualEntry = serde_json::from_str(line)
            .map_err(|err| PipelineError::Config(format!("verdict line {}: {err}", i + 1)))?;
        if !seen.insert(e.record.clone()) {
            return Err(PipelineError::Config(format!("verdict line {}: duplicate record {}", i + 1, e.record)));
        }
        out.push(e);
    }
    Ok(out)
}

/// Applies manual verdicts: reviewed records that fail are removed,
/// unreviewed records are kept and counted.
pub fn apply_manual_verdicts(
    records: &[DialogueRecord],
    entries: &[ManualEntry],
) -> (Vec<DialogueRecord>, Vec<Option<ValidationVerdict>>, ManualSummary) {
    let mut kept = Vec::new();
    let mut verdicts = Vec::new();
    let (mut reviewed, mut passed) = (0, 0);
    for r in records {
        let key = record_key(r);
        let v = entries
            .iter()
            .find(|e| e.record == key)
            .map(|e| ValidationVerdict::new(Stage::Manual, r, e.detected.clone(), e.reason.clone()));
        match &v {
            Some(v) => {
                reviewed += 1;
                if v.passed {
                    passed += 1;
                    kept.push(r.clone());
                }
            }
            None => kept.push(r.clone()),
        }
        verdicts.push(v);
    }
    let summary = ManualSummary { reviewed, passed, unreviewed: records.len() - reviewed, pass_rate: pass_rate(passed, reviewed) };
    (kept, verdicts, summary)
}
