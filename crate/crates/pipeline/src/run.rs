//! The three stages composed, with journaling, quotas and a report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use persona_core::chat::{ChatClient, DecodeParams};
use persona_core::corpus::{write_dialogues, DialogueRecord};
use persona_core::{Dimension, TraitId};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::synthesize_dialogue;
use crate::error::{PipelineError, Result};
use crate::journal::{Entry, Journal, SynthOutcome};
use crate::topics::{classify_sentence, split_sentences, Classification, SeedTopic, SourceSentence};
use crate::validate::{auto_validate, pass_rate, ValidationVerdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// API root of a chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// JSON lines of `{"source_ref": .., "text": ..}`; texts are split
    /// into sentences.
    pub sources: PathBuf,
    pub output: PathBuf,
    /// Defaults to `<output>.journal.jsonl`.
    pub journal: Option<PathBuf>,
    /// Defaults to `<output>.report.json`.
    pub report: Option<PathBuf>,
    pub quota_per_trait: usize,
    /// Per-trait overrides of `quota_per_trait`.
    pub quotas: BTreeMap<TraitId, usize>,
    /// Concurrent chat requests.
    pub parallelism: usize,
    /// Sampling temperature of dialogue synthesis.
    pub temperature: f64,
    /// Temperature of the classification and validation calls.
    pub judge_temperature: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model: "gpt-3.5-turbo-1106".into(),
            api_key_env: "PERSONA_API_KEY".into(),
            sources: PathBuf::from("sources.jsonl"),
            output: PathBuf::from("dialogues.jsonl"),
            journal: None,
            report: None,
            quota_per_trait: 5,
            quotas: BTreeMap::new(),
            parallelism: 4,
            temperature: 1.0,
            judge_temperature: 0.0,
        }
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.judge_temperature >= 0.0) {
            return Err(PipelineError::Config("temperatures must be non-negative".into()));
        }
        Ok(())
    }

    pub fn quota(&self, t: TraitId) -> usize {
        self.quotas.get(&t).copied().unwrap_or(self.quota_per_trait)
    }

    pub fn journal_path(&self) -> PathBuf {
        self.journal.clone().unwrap_or_else(|| with_suffix(&self.output, ".journal.jsonl"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.report.clone().unwrap_or_else(|| with_suffix(&self.output, ".report.json"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub attempted: usize,
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationCounts {
    pub attempted: usize,
    pub passed: usize,
    pub failed: usize,
    /// Percentage of attempted records that passed.
    pub pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitCount {
    #[serde(rename = "trait")]
    pub trait_id: TraitId,
    pub quota: usize,
    pub topics: usize,
    pub produced: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub sentences: usize,
    pub extraction: StageCounts,
    pub synthesis: StageCounts,
    pub validation: ValidationCounts,
    pub per_trait: Vec<TraitCount>,
    pub drop_reasons: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
    pub records: usize,
}

/// Reads the source file and splits every text into sentences.
pub fn load_sources(path: &Path) -> Result<Vec<SourceSentence>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let src: SourceSentence = serde_json::from_str(line)
            .map_err(|e| PipelineError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.extend(split_sentences(&src.source_ref, &src.text));
    }
    Ok(out)
}

fn fingerprint(cfg: &PipelineConfig, sentences: &[SourceSentence]) -> String {
    let key = serde_json::json!({
        "model": cfg.model,
        "temperature": cfg.temperature,
        "judge_temperature": cfg.judge_temperature,
        "sentences": sentences,
    });
    Sha256::digest(key.to_string().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn interrupted(stage: &'static str, completed: usize, source: persona_core::Error) -> PipelineError {
    PipelineError::Interrupted { stage, completed, source }
}

fn bump(map: &mut BTreeMap<String, usize>, key: String) {
    *map.entry(key).or_default() += 1;
}

/// Runs extraction, synthesis and validation until every trait's quota is
/// met or its topics run out. Finished work is journaled, so a rerun after
/// a failure resumes where it stopped. Writes the dataset and the report
/// to the configured paths and returns the report.
pub fn run_pipeline(cfg: &PipelineConfig, client: &dyn ChatClient) -> Result<PipelineReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    let judge = DecodeParams { temperature: cfg.judge_temperature };
    let synth = DecodeParams { temperature: cfg.temperature };
    let mut report = PipelineReport::default();
    let active: Vec<TraitId> = TraitId::all().into_iter().filter(|&t| cfg.quota(t) > 0).collect();
    let mut records: Vec<DialogueRecord> = Vec::new();

    if !active.is_empty() {
        let sentences = load_sources(&cfg.sources)?;
        if sentences.is_empty() {
            return Err(PipelineError::Config(format!("{} holds no sentences", cfg.sources.display())));
        }
        report.sentences = sentences.len();
        let mut journal = Journal::open(&cfg.journal_path(), &fingerprint(cfg, &sentences))?;

        // Stage 1: classify every sentence along each needed dimension.
        let mut topics: BTreeMap<TraitId, Vec<(String, SeedTopic)>> = BTreeMap::new();
        let dims: Vec<Dimension> = Dimension::ALL.into_iter().filter(|d| active.iter().any(|t| t.dimension == *d)).collect();
        for &d in &dims {
            let todo: Vec<usize> = (0..sentences.len()).filter(|i| !journal.extracted.contains_key(&(d, *i))).collect();
            for wave in todo.chunks(cfg.parallelism) {
                let results: Vec<_> = pool.install(|| {
                    wave.par_iter().map(|&i| classify_sentence(&sentences[i], d, client, &judge)).collect()
                });
                let mut failure = None;
                for (&i, r) in wave.iter().zip(results) {
                    match r {
                        Ok(outcome) => journal.append(&Entry::Extract { dimension: d, index: i, outcome })?,
                        Err(e) => failure = failure.or(Some(e)),
                    }
                }
                if let Some(e) = failure {
                    return Err(interrupted("extraction", journal.extracted.len(), e));
                }
            }
            for i in 0..sentences.len() {
                report.extraction.attempted += 1;
                match &journal.extracted[&(d, i)] {
                    Classification::Topic(t) => {
                        report.extraction.kept += 1;
                        topics.entry(t.trait_id).or_default().push((format!("{}:{i}", d.letter()), t.clone()));
                    }
                    Classification::Dropped { source_ref, reason } => {
                        report.extraction.dropped += 1;
                        debug!("{source_ref} dropped for {}: {reason}", d.name());
                        bump(&mut report.drop_reasons, format!("extraction: {reason}"));
                    }
                }
            }
        }

        // Stages 2 and 3: synthesize and validate topic by topic until the
        // quota is met.
        for t in TraitId::all() {
            let quota = cfg.quota(t);
            let pool_topics = topics.remove(&t).unwrap_or_default();
            let mut produced = 0;
            let mut next = 0;
            while produced < quota && next < pool_topics.len() {
                let take = (quota - produced).min(cfg.parallelism).min(pool_topics.len() - next);
                let wave = &pool_topics[next..next + take];
                next += take;
                let results: Vec<_> = pool.install(|| {
                    wave.par_iter()
                        .map(|(key, topic)| work_topic(key, topic, &journal, client, &synth, &judge))
                        .collect()
                });
                let mut failure = None;
                for ((key, _), r) in wave.iter().zip(results) {
                    let (s, v) = r;
                    if let Some(s) = s.new_entry {
                        journal.append(&Entry::Synth { key: key.clone(), outcome: s })?;
                    }
                    if let Some(v) = v.new_entry {
                        journal.append(&Entry::Validate { key: key.clone(), verdict: v })?;
                    }
                    if let Some(e) = s.error.or(v.error) {
                        failure = failure.or(Some(e));
                    }
                }
                if let Some(e) = failure {
                    return Err(interrupted("synthesis/validation", journal.synthesized.len(), e));
                }
                for (key, _) in wave {
                    report.synthesis.attempted += 1;
                    match &journal.synthesized[key] {
                        SynthOutcome::Failed(reason) => {
                            report.synthesis.dropped += 1;
                            debug!("topic {key} not synthesized: {reason}");
                            bump(&mut report.drop_reasons, "synthesis: unparseable dialogue".into());
                        }
                        SynthOutcome::Record(rec) => {
                            report.synthesis.kept += 1;
                            report.validation.attempted += 1;
                            let verdict = &journal.validated[key];
                            if verdict.passed {
                                report.validation.passed += 1;
                                produced += 1;
                                records.push(rec.clone());
                            } else {
                                report.validation.failed += 1;
                                let why = if verdict.reason == "unparseable" { "unparseable" } else { "wrong dimension" };
                                bump(&mut report.drop_reasons, format!("validation: {why}"));
                            }
                        }
                    }
                }
            }
            if produced < quota {
                let w = format!("{t}: produced {produced} of quota {quota} after exhausting {} topics", pool_topics.len());
                warn!("{w}");
                report.warnings.push(w);
            }
            report.per_trait.push(TraitCount { trait_id: t, quota, topics: pool_topics.len(), produced });
        }
    } else {
        report.per_trait = TraitId::all()
            .into_iter()
            .map(|t| TraitCount { trait_id: t, quota: 0, topics: 0, produced: 0 })
            .collect();
    }

    report.validation.pass_rate = pass_rate(report.validation.passed, report.validation.attempted);
    report.records = records.len();
    write_atomically(&cfg.output, |p| Ok(write_dialogues(p, &records)?))?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    write_atomically(&cfg.report_path(), |p| Ok(std::fs::write(p, json.as_bytes())?))?;
    Ok(report)
}

fn write_atomically(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = with_suffix(path, ".tmp");
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Step<T> {
    new_entry: Option<T>,
    error: Option<persona_core::Error>,
}

impl<T> Step<T> {
    fn none() -> Self {
        Self { new_entry: None, error: None }
    }
}

/// Synthesis then validation of one topic, skipping whatever the journal
/// already holds.
fn work_topic(
    key: &str,
    topic: &SeedTopic,
    journal: &Journal,
    client: &dyn ChatClient,
    synth: &DecodeParams,
    judge: &DecodeParams,
) -> (Step<SynthOutcome>, Step<ValidationVerdict>) {
    let mut s = Step::none();
    let outcome = match journal.synthesized.get(key) {
        Some(o) => o.clone(),
        None => match synthesize_dialogue(topic, client, synth) {
            Ok(rec) => SynthOutcome::Record(rec),
            Err(PipelineError::Core(e)) => {
                s.error = Some(e);
                return (s, Step::none());
            }
            Err(e) => SynthOutcome::Failed(e.to_string()),
        },
    };
    if !journal.synthesized.contains_key(key) {
        s.new_entry = Some(outcome.clone());
    }
    let mut v = Step::none();
    if let SynthOutcome::Record(rec) = &outcome {
        if !journal.validated.contains_key(key) {
            match auto_validate(rec, client, judge) {
                Ok(verdict) => v.new_entry = Some(verdict),
                Err(e) => v.error = Some(e),
            }
        }
    }
    (s, v)
}
