use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DialogueRecord;
use crate::error::{Error, Result};

/// A rejected input line (1-based).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Loaded {
    pub records: Vec<DialogueRecord>,
    pub errors: Vec<LineError>,
}

pub fn parse_dialogue_line(line: &str) -> Result<DialogueRecord, String> {
    let rec: DialogueRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    rec.validate()?;
    Ok(rec)
}

/// Reads a JSON-lines file, keeping valid records and reporting each bad
/// line with its location. Blank lines are skipped.
pub fn load_dialogues(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path)?;
    let mut out = Loaded::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_dialogue_line(line) {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(LineError { line: i + 1, message }),
        }
    }
    Ok(out)
}

/// Like [`load_dialogues`] but fails on the first bad line.
pub fn load_dialogues_strict(path: &Path) -> Result<Vec<DialogueRecord>> {
    let loaded = load_dialogues(path)?;
    match loaded.errors.into_iter().next() {
        Some(e) => Err(Error::CorpusLine { line: e.line, message: e.message }),
        None => Ok(loaded.records),
    }
}

pub fn write_dialogues(path: &Path, records: &[DialogueRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
