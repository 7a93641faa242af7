use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use persona_core::chat::{ChatClient, DecodeParams, ScriptedClient};
use persona_core::corpus::{load_dialogues_strict, DialogueRecord, Speaker, Turn};
use persona_core::{Dimension, Level, TraitId};
use persona_pipeline::journal::Journal;
use persona_pipeline::prompts::{seed_topic_system, synthesis_system, synthesis_user, validation_user, VALIDATION_SYSTEM};
use persona_pipeline::validate::{record_key, ManualEntry};
use persona_pipeline::*;

/// Sentences carry their intended labels as `[O+ N-]` tags; the scripted
/// world answers from those tags the way a consistent judge would.
fn tags(text: &str) -> Vec<TraitId> {
    let Some(start) = text.find('[') else { return Vec::new() };
    let end = text[start..].find(']').map(|e| start + e).unwrap_or(text.len());
    text[start + 1..end].split_whitespace().filter_map(|c| c.parse().ok()).collect()
}

fn dimension_in_system(system: &str) -> Option<Dimension> {
    Dimension::ALL.into_iter().find(|d| system.contains(&format!("degree of {} in a sentence", d.name().to_lowercase())))
}

fn script_dialogue(exchanges: usize, seed: &str) -> String {
    let mut s = String::from("Here is the dialogue.\n\n");
    for k in 0..exchanges {
        s.push_str(&format!("Character1: Question {k} about what you think?\n"));
        s.push_str(&format!("Character2: Answer {k}, thinking of {seed}\n"));
    }
    s
}

fn world_reply(system: &str, user: &str) -> Option<String> {
    if let Some(d) = dimension_in_system(system) {
        let hit = tags(user).into_iter().find(|t| t.dimension == d);
        return Some(match hit {
            Some(t) => format!("Reason: it shows.\nCategory: facet{}-{}", d.letter().to_ascii_lowercase(), t.level.as_str()),
            None => "This is a plain fact, so: neutral".into(),
        });
    }
    if system.contains("screenwriter") {
        let seed = user.rsplit("[seed topic]:\n").next()?;
        if seed.contains("garbled") {
            return Some("Character2: I start.\nCharacter1: no".into());
        }
        return Some(script_dialogue(5, seed));
    }
    if system == VALIDATION_SYSTEM {
        let dialogue = user.rsplit("Input:\n").next()?;
        let shown = tags(dialogue).first().map(|t| t.dimension)?;
        let judged = if dialogue.contains("offtrait") {
            Dimension::ALL.into_iter().find(|&d| d != shown).unwrap()
        } else {
            shown
        };
        return Some(format!("Reason: clear.\nResult: {}", judged.name()));
    }
    None
}

fn world() -> ScriptedClient {
    ScriptedClient::new().with_rule(world_reply)
}

fn all_traits_sources(per_trait: usize) -> String {
    let mut lines = Vec::new();
    for t in TraitId::all() {
        let body: Vec<String> = (0..per_trait).map(|k| format!("Sentence {k} of {} [{}] here.", t.code(), t.code())).collect();
        lines.push(serde_json::json!({"source_ref": format!("essay-{}", t.code()), "text": body.join(" ")}).to_string());
    }
    lines.push(serde_json::json!({"source_ref": "ad", "text": "Buy two, get one free. The sky is blue."}).to_string());
    lines.join("\n") + "\n"
}

fn config_in(dir: &Path, sources: &str, quota: usize) -> PipelineConfig {
    let src = dir.join("sources.jsonl");
    std::fs::write(&src, sources).unwrap();
    PipelineConfig {
        sources: src,
        output: dir.join("out/dialogues.jsonl"),
        quota_per_trait: quota,
        parallelism: 3,
        ..PipelineConfig::default()
    }
}

fn sentence(text: &str) -> SourceSentence {
    SourceSentence { source_ref: "s#1".into(), text: text.into() }
}

#[test]
fn neutral_sentences_are_dropped_and_facets_kept() {
    let d = Dimension::Openness;
    let sys = seed_topic_system(d);
    let client = ScriptedClient::new()
        .with_response(&sys, "Buy now and save.", "neutral")
        .with_response(&sys, "I daydream about dragons.", "Reasoning: rich inner life.\n\"fantasy-high\"");
    let params = DecodeParams { temperature: 0.0 };
    let ex = extract_seed_topics(&[sentence("Buy now and save.")], d, &client, &params).unwrap();
    assert!(ex.topics.is_empty());
    assert_eq!(ex.drops, vec![("s#1".to_string(), "neutral".to_string())]);

    let ex = extract_seed_topics(&[sentence("I daydream about dragons.")], d, &client, &params).unwrap();
    assert_eq!(ex.topics.len(), 1);
    let t = &ex.topics[0];
    assert_eq!(t.trait_id, TraitId::new(d, Level::High));
    assert_eq!(t.facet_label, "fantasy-high");
    assert_eq!(t.sentence, "I daydream about dragons.");
    assert!(matches!(
        extract_seed_topics(&[], d, &client, &params),
        Err(PipelineError::Config(_))
    ));
}

#[test]
fn fifty_sentence_fixture_yields_exact_topic_multiset() {
    let d = Dimension::Neuroticism;
    let mut sentences = Vec::new();
    let mut expected: BTreeMap<String, usize> = BTreeMap::new();
    for k in 0..50 {
        let (text, label) = match k % 5 {
            0 => (format!("Fact number {k} [O+]."), None),
            1 | 2 => (format!("I worry a lot, case {k} [N+]."), Some("facetn-high")),
            3 => (format!("Nothing rattles me, case {k} [N-]."), Some("facetn-low")),
            _ => (format!("Plain statement {k}."), None),
        };
        if let Some(l) = label {
            *expected.entry(l.to_string()).or_default() += 1;
        }
        sentences.push(SourceSentence { source_ref: format!("fx#{k}"), text });
    }
    let ex = extract_seed_topics(&sentences, d, &world(), &DecodeParams::default()).unwrap();
    let mut got: BTreeMap<String, usize> = BTreeMap::new();
    for t in &ex.topics {
        assert_eq!(t.trait_id.dimension, d);
        *got.entry(t.facet_label.clone()).or_default() += 1;
    }
    assert_eq!(got, expected);
    assert_eq!(ex.topics.len() + ex.drops.len(), 50);
    assert_eq!(ex.processed, 50);
}

#[test]
fn extraction_failure_reports_progress() {
    let sentences: Vec<SourceSentence> =
        (0..5).map(|k| SourceSentence { source_ref: format!("x#{k}"), text: format!("s{k} [O+]") }).collect();
    let client = ScriptedClient::new().with_rule(|s, u| (!u.starts_with("s3")).then(|| world_reply(s, u)).flatten());
    match extract_seed_topics(&sentences, Dimension::Openness, &client, &DecodeParams::default()) {
        Err(PipelineError::Extraction { progress, .. }) => {
            assert_eq!(progress.processed, 3);
            assert_eq!(progress.topics.len(), 3);
        }
        other => panic!("expected an extraction error, got {other:?}"),
    }
}

#[test]
fn dialogue_parsing() {
    let turns = parse_dialogue(&script_dialogue(5, "my exams")).unwrap();
    assert_eq!(turns.len(), 10);
    assert_eq!(turns[0].speaker, Speaker::Questioner);
    assert!(turns.windows(2).all(|w| w[0].speaker != w[1].speaker));

    let bad = "Character1: hi?\nCharacter2: hello\nCharacter2: again";
    match parse_dialogue(bad) {
        Err(PipelineError::DialogueParse { line, message }) => {
            assert_eq!(line, 3);
            assert!(message.contains("consecutive Character2"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(matches!(parse_dialogue("Character2: me first"), Err(PipelineError::DialogueParse { line: 1, .. })));
    assert!(parse_dialogue("Character1: only a question?").is_err());

    let loose = "**Q:** Do you\nplan ahead?\n**A:** Always.";
    let turns = parse_dialogue(loose).unwrap();
    assert_eq!(turns[0].text, "Do you plan ahead?");
    assert_eq!(turns[1].text, "Always.");
}

#[test]
fn twenty_topics_make_twenty_valid_records() {
    let client = world();
    for k in 0..20 {
        let t = TraitId::from_index(k % 10).unwrap();
        let topic = SeedTopic {
            sentence: format!("Topic {k} [{}]", t.code()),
            trait_id: t,
            facet_label: "facet-high".into(),
            source_ref: format!("t#{k}"),
        };
        let rec = synthesize_dialogue(&topic, &client, &DecodeParams::default()).unwrap();
        rec.validate().unwrap();
        assert_eq!(rec.trait_id, t);
        assert_eq!(rec.topic, topic.sentence);
        assert_eq!(rec.turns.len(), 10);
    }
    let neutral = SeedTopic {
        sentence: "x".into(),
        trait_id: TraitId::from_index(0).unwrap(),
        facet_label: "neutral".into(),
        source_ref: "n".into(),
    };
    assert!(matches!(synthesize_dialogue(&neutral, &client, &DecodeParams::default()), Err(PipelineError::Config(_))));
}

#[test]
fn synthesis_prompts_reach_the_client_verbatim() {
    let t: TraitId = "C-".parse().unwrap();
    let topic = SeedTopic { sentence: "I never plan.".into(), trait_id: t, facet_label: "orderliness-low".into(), source_ref: "r".into() };
    let client = ScriptedClient::new().with_response(
        &synthesis_system(t),
        &synthesis_user(t, "I never plan."),
        "Character1: Do you plan?\nCharacter2: Not really.",
    );
    let rec = synthesize_dialogue(&topic, &client, &DecodeParams::default()).unwrap();
    assert_eq!(render_dialogue(&rec), "Character1: Do you plan?\nCharacter2: Not really.");
}

fn record(t: TraitId, tag: &str) -> DialogueRecord {
    DialogueRecord {
        trait_id: t,
        topic: tag.into(),
        turns: vec![
            Turn { speaker: Speaker::Questioner, text: "How was today?".into() },
            Turn { speaker: Speaker::Discloser, text: format!("Eventful {tag}") },
        ],
    }
}

#[test]
fn validation_verdicts() {
    let np: TraitId = "N+".parse().unwrap();
    let rec = record(np, "[N+]");
    let user = validation_user(&render_dialogue(&rec));
    let params = DecodeParams { temperature: 0.0 };
    let pass = ScriptedClient::new().with_response(VALIDATION_SYSTEM, &user, "Reason: worry.\nResult: Neuroticism");
    let v = auto_validate(&rec, &pass, &params).unwrap();
    assert!(v.passed);
    assert_eq!(v.detected_traits, vec![Dimension::Neuroticism]);
    let fail = ScriptedClient::new().with_response(VALIDATION_SYSTEM, &user, "Reason: ideas.\nResult: Openness");
    let v = auto_validate(&rec, &fail, &params).unwrap();
    assert!(!v.passed);
    assert_eq!(v.detected_traits, vec![Dimension::Openness]);
    let junk = ScriptedClient::new().with_response(VALIDATION_SYSTEM, &user, "no idea");
    let v = auto_validate(&rec, &junk, &params).unwrap();
    assert!(!v.passed);
    assert_eq!(v.reason, "unparseable");
}

#[test]
fn pass_rate_over_a_thousand_records() {
    let client = world();
    let mut passed = 0;
    for k in 0..1000 {
        let t = TraitId::from_index(k % 10).unwrap();
        let tag = if k < 972 { format!("[{}] #{k}", t.code()) } else { format!("[{}] #{k} offtrait", t.code()) };
        if auto_validate(&record(t, &tag), &client, &DecodeParams::default()).unwrap().passed {
            passed += 1;
        }
    }
    assert_eq!(passed, 972);
    assert!((pass_rate(passed, 1000) - 97.2).abs() < 1e-12);
}

#[test]
fn manual_verdicts_filter_reviewed_records() {
    let dir = tempfile::tempdir().unwrap();
    let a = record("E+".parse().unwrap(), "a");
    let b = record("E-".parse().unwrap(), "b");
    let c = record("O+".parse().unwrap(), "c");
    let entries = [
        ManualEntry { record: record_key(&a), detected: vec![Dimension::Extraversion], reason: String::new() },
        ManualEntry { record: record_key(&b), detected: vec![Dimension::Openness], reason: "off".into() },
    ];
    let path = dir.path().join("verdicts.jsonl");
    let text: Vec<String> = entries.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
    std::fs::write(&path, text.join("\n")).unwrap();
    let loaded = load_manual_verdicts(&path).unwrap();
    assert_eq!(loaded, entries);
    let (kept, verdicts, summary) = apply_manual_verdicts(&[a.clone(), b, c.clone()], &loaded);
    assert_eq!(kept, vec![a, c]);
    assert!(verdicts[0].as_ref().unwrap().passed);
    assert!(!verdicts[1].as_ref().unwrap().passed);
    assert!(verdicts[2].is_none());
    assert_eq!((summary.reviewed, summary.passed, summary.unreviewed), (2, 1, 1));
    assert!((summary.pass_rate - 50.0).abs() < 1e-12);

    std::fs::write(&path, format!("{}\n{}\n", text[0], text[0])).unwrap();
    assert!(matches!(load_manual_verdicts(&path), Err(PipelineError::Config(m)) if m.contains("duplicate")));
}

#[test]
fn happy_path_meets_every_quota() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &all_traits_sources(7), 5);
    let report = run_pipeline(&cfg, &world()).unwrap();
    let records = load_dialogues_strict(&cfg.output).unwrap();
    assert_eq!(records.len(), 50);
    assert_eq!(report.records, 50);
    for t in TraitId::all() {
        assert_eq!(records.iter().filter(|r| r.trait_id == t).count(), 5);
    }
    assert!(report.per_trait.iter().all(|c| c.produced == 5 && c.quota == 5 && c.topics == 7));
    assert_eq!(report.sentences, 72);
    assert_eq!(report.extraction.attempted, 5 * 72);
    assert_eq!(report.extraction.kept, 70);
    assert_eq!(report.validation.pass_rate, 100.0);
    assert!(report.warnings.is_empty());
    let on_disk: PipelineReport = serde_json::from_str(&std::fs::read_to_string(cfg.report_path()).unwrap()).unwrap();
    assert_eq!(on_disk, report);
}

#[test]
fn unmet_quotas_and_failures_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut sources = all_traits_sources(2);
    sources.push_str(&serde_json::json!({"source_ref": "extra", "text": "A garbled [A+] one. An offtrait [A+] one."}).to_string());
    sources.push('\n');
    let mut cfg = config_in(dir.path(), &sources, 3);
    cfg.quotas.insert("A+".parse().unwrap(), 4);
    cfg.quotas.insert("O-".parse().unwrap(), 0);
    let report = run_pipeline(&cfg, &world()).unwrap();
    let a_plus = report.per_trait.iter().find(|c| c.trait_id.code() == "A+").unwrap();
    assert_eq!((a_plus.quota, a_plus.topics, a_plus.produced), (4, 4, 2));
    let o_minus = report.per_trait.iter().find(|c| c.trait_id.code() == "O-").unwrap();
    assert_eq!(o_minus.produced, 0);
    assert_eq!(report.warnings.len(), 9, "{:?}", report.warnings);
    assert_eq!(report.drop_reasons["synthesis: unparseable dialogue"], 1);
    assert_eq!(report.drop_reasons["validation: wrong dimension"], 1);
    assert_eq!(report.validation.attempted, 2 * 8 + 3);
    assert_eq!(report.validation.failed, 1);
    assert_eq!(report.records, 2 * 9);
}

#[test]
fn zero_quota_writes_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config_in(dir.path(), "", 0);
    cfg.sources = dir.path().join("does-not-exist.jsonl");
    let client = world();
    let report = run_pipeline(&cfg, &client).unwrap();
    assert_eq!(client.calls(), 0);
    assert_eq!(report.records, 0);
    assert_eq!(report.extraction.attempted, 0);
    assert_eq!(report.validation.pass_rate, 0.0);
    assert_eq!(std::fs::read_to_string(&cfg.output).unwrap(), "");
}

#[test]
fn identical_runs_are_byte_identical() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c1 = config_in(d1.path(), &all_traits_sources(6), 4);
    let mut c2 = config_in(d2.path(), &all_traits_sources(6), 4);
    c2.parallelism = 1;
    run_pipeline(&c1, &world()).unwrap();
    run_pipeline(&c2, &world()).unwrap();
    assert_eq!(std::fs::read(&c1.output).unwrap(), std::fs::read(&c2.output).unwrap());
    assert_eq!(std::fs::read(c1.report_path()).unwrap(), std::fs::read(c2.report_path()).unwrap());
}

/// Answers like the scripted world but fails every call after the first
/// `budget` successful ones.
struct Flaky {
    inner: ScriptedClient,
    budget: usize,
    ok: AtomicUsize,
}

impl ChatClient for Flaky {
    fn complete(&self, system: &str, user: &str, params: &DecodeParams) -> persona_core::Result<String> {
        if self.ok.fetch_add(1, Ordering::SeqCst) >= self.budget {
            self.ok.fetch_sub(1, Ordering::SeqCst);
            return Err(persona_core::Error::Client("connection reset".into()));
        }
        self.inner.complete(system, user, params)
    }
}

#[test]
fn interrupted_run_resumes_without_repeating_work() {
    let reference_dir = tempfile::tempdir().unwrap();
    let reference = config_in(reference_dir.path(), &all_traits_sources(5), 3);
    let full = world();
    run_pipeline(&reference, &full).unwrap();
    let total = full.calls();

    for budget in [40, 300, total - 1] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config_in(dir.path(), &all_traits_sources(5), 3);
        let flaky = Flaky { inner: world(), budget, ok: AtomicUsize::new(0) };
        match run_pipeline(&cfg, &flaky) {
            Err(PipelineError::Interrupted { .. }) => {}
            other => panic!("budget {budget}: expected an interruption, got {other:?}"),
        }
        let resumed = world();
        run_pipeline(&cfg, &resumed).unwrap();
        assert_eq!(resumed.calls(), total - budget, "budget {budget}");
        assert_eq!(std::fs::read(&cfg.output).unwrap(), std::fs::read(&reference.output).unwrap());
        assert_eq!(std::fs::read(cfg.report_path()).unwrap(), std::fs::read(reference.report_path()).unwrap());
    }
}

#[test]
fn journal_rejects_other_runs_and_drops_torn_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &all_traits_sources(2), 1);
    run_pipeline(&cfg, &world()).unwrap();
    let path = cfg.journal_path();
    assert!(matches!(Journal::open(&path, "someone else"), Err(PipelineError::Journal(_))));

    let mut text = std::fs::read_to_string(&path).unwrap();
    let entries = text.lines().count();
    text.push_str("{\"kind\":\"synth\",\"ke");
    std::fs::write(&path, &text).unwrap();
    let again = world();
    run_pipeline(&cfg, &again).unwrap();
    assert_eq!(again.calls(), 0);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), entries);

    let mut changed = cfg.clone();
    changed.temperature = 0.7;
    assert!(matches!(run_pipeline(&changed, &world()), Err(PipelineError::Journal(_))));
}

#[test]
fn mock_runs_never_touch_the_network() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config_in(dir.path(), &all_traits_sources(2), 1);
    cfg.endpoint = format!("http://{}/v1", listener.local_addr().unwrap());
    let script = MockScript {
        responses: BTreeMap::new(),
        rules: vec![
            MockRule { system_contains: Some("psychologist".into()), user_contains: Some("[".into()), reply: "anxiety-high".into() },
            MockRule { system_contains: Some("psychologist".into()), user_contains: None, reply: "neutral".into() },
            MockRule { system_contains: Some("screenwriter".into()), user_contains: None, reply: script_dialogue(2, "x") },
            MockRule { system_contains: None, user_contains: None, reply: "Result: Openness, Conscientiousness, Extraversion, Agreeableness, Neuroticism".into() },
        ],
    };
    let report = run_pipeline(&cfg, &script.into_client()).unwrap();
    // Every sentence reads as a high-level facet, so only the five high traits fill.
    assert_eq!(report.records, 5);
    assert!(matches!(listener.accept(), Err(e) if e.kind() == std::io::ErrorKind::WouldBlock));
}

#[test]
fn config_file_defaults_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    std::fs::write(&p, r#"{"output": "data/x.jsonl", "quotas": {"N+": 2}}"#).unwrap();
    let cfg = PipelineConfig::load(&p).unwrap();
    assert_eq!(cfg.quota("N+".parse().unwrap()), 2);
    assert_eq!(cfg.quota("N-".parse().unwrap()), 5);
    assert_eq!(cfg.journal_path(), Path::new("data/x.jsonl.journal.jsonl"));
    assert_eq!(cfg.report_path(), Path::new("data/x.jsonl.report.json"));
    assert_eq!(cfg.judge_temperature, 0.0);
    std::fs::write(&p, r#"{"parallelism": 0}"#).unwrap();
    assert!(matches!(PipelineConfig::load(&p), Err(PipelineError::Config(_))));
    std::fs::write(&p, r#"{"quotas": {"Q+": 1}}"#).unwrap();
    assert!(matches!(PipelineConfig::load(&p), Err(PipelineError::Config(_))));
}
