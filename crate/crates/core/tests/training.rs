use std::fs;

use persona_core::checkpoint::{checkpoint_paths, load_checkpoint, read_manifest, save_checkpoint};
use persona_core::corpus::{synth_corpus, DialogueRecord, StyleSpec};
use persona_core::lora::AdapterConfig;
use persona_core::model::{Baseline, Model, ModelConfig};
use persona_core::objectives::RegularizerMode;
use persona_core::par::ExecMode;
use persona_core::tokenizer::BOS;
use persona_core::trainer::{evaluate_batch, regularizer_values, run_baseline, train, train_with, TrainConfig};
use persona_core::{Error, TraitId};

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        n_heads: 2,
        context_len: 64,
        adapter: AdapterConfig { num_experts: 4, total_rank: 8, personality_dim: 6, ..AdapterConfig::default() },
        ..ModelConfig::default()
    }
}

fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 1, batch_size: 8, learning_rate: 5e-3, max_input_len: 40, max_output_len: 24, seed, ..Default::default() }
}

fn corpus(n_per_trait: usize) -> Vec<DialogueRecord> {
    synth_corpus(&StyleSpec::standard(1), n_per_trait, 2).unwrap()
}

fn moe(seed: u64) -> Model {
    Model::new(tiny_model_config(), Baseline::Moe, seed).unwrap()
}

#[test]
fn step_count_is_ceil_of_batches_times_epochs() {
    let data = corpus(4);
    let cfg = TrainConfig { batch_size: 16, ..tiny_train(0) };
    let report = train(&cfg, &data, &mut moe(0)).unwrap();
    assert_eq!(report.steps.len(), 3);

    // The single-adapter baseline accepts a corpus missing some traits.
    let mut single = Model::new(tiny_model_config(), Baseline::SingleLora, 0).unwrap();
    let cfg = TrainConfig { baseline: Baseline::SingleLora, ..cfg };
    let report = train(&cfg, &data[..32], &mut single).unwrap();
    assert_eq!(report.steps.iter().map(|s| s.step).collect::<Vec<_>>(), vec![1, 2]);
    let two_epochs = TrainConfig { epochs: 2, ..cfg };
    assert_eq!(train(&two_epochs, &data[..33], &mut single).unwrap().steps.len(), 6);
}

#[test]
fn zero_lambda_matches_unregularized_run() {
    let data = corpus(6);
    let mut a = moe(1);
    let mut b = moe(1);
    let ra = train(&TrainConfig { lambda: 0.0, mode: RegularizerMode::Psl, ..tiny_train(1) }, &data, &mut a).unwrap();
    let rb = train(&TrainConfig { mode: RegularizerMode::None, ..tiny_train(1) }, &data, &mut b).unwrap();
    assert_eq!(ra.lm_curve(), rb.lm_curve());
    assert_eq!(a, b);
}

#[test]
fn runs_are_bit_reproducible_in_both_exec_modes() {
    let data = corpus(6);
    let mut a = moe(2);
    let mut b = moe(2);
    let mut c = moe(2);
    let ra = train(&TrainConfig { exec: ExecMode::Parallel, ..tiny_train(2) }, &data, &mut a).unwrap();
    let rb = train(&TrainConfig { exec: ExecMode::Parallel, ..tiny_train(2) }, &data, &mut b).unwrap();
    let rc = train(&TrainConfig { exec: ExecMode::Sequential, ..tiny_train(2) }, &data, &mut c).unwrap();
    assert_eq!(ra.steps, rb.steps);
    assert_eq!(ra.steps, rc.steps);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn base_weights_are_untouched_in_every_regime() {
    let data = corpus(4);
    let regimes = [
        (Baseline::Moe, RegularizerMode::Psl),
        (Baseline::Moe, RegularizerMode::Aux),
        (Baseline::Moe, RegularizerMode::None),
        (Baseline::SingleLora, RegularizerMode::None),
        (Baseline::PerTraitLora, RegularizerMode::None),
    ];
    for (baseline, mode) in regimes {
        let cfg = TrainConfig { baseline, mode, ..tiny_train(3) };
        let before = Model::new(tiny_model_config(), baseline, 3).unwrap();
        let (after, report) = run_baseline(&cfg, &tiny_model_config(), &data).unwrap();
        assert_eq!(before.base_checksum(), after.base_checksum(), "{baseline} {mode:?}");
        assert_eq!(report.base_checksum, after.base_checksum());
        assert_ne!(before, after, "{baseline} {mode:?} did not train");
    }
}

#[test]
fn logged_regularizer_does_not_depend_on_the_batch() {
    let data = corpus(4);
    let mut model = moe(4);
    train(&tiny_train(4), &data, &mut model).unwrap();
    let cfg = tiny_train(4);
    let batch = |range: std::ops::Range<usize>| -> Vec<_> {
        data[range].iter().map(|r| (model.prepare(r, r.trait_id, cfg.max_len()), r.trait_id)).collect()
    };
    let x = evaluate_batch(&model, &batch(0..8), &cfg).unwrap();
    let y = evaluate_batch(&model, &batch(20..36), &cfg).unwrap();
    assert_ne!(x.lm_loss, y.lm_loss);
    assert!((x.psl - y.psl).abs() <= 1e-12);
}

#[test]
fn logged_psl_is_recomputable_from_a_checkpoint() {
    let data = corpus(4);
    let mut model = moe(5);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train(5);
    let mut logged = None;
    let mut log = Vec::new();
    train_with(&cfg, &data, &mut model, Some(&mut log), &mut |rec, m| {
        let (psl, _) = regularizer_values(m)?;
        assert!((psl.iter().sum::<f64>() / psl.len() as f64 - rec.psl).abs() <= 1e-12);
        if rec.step == 3 {
            save_checkpoint(m, Some(&cfg), dir.path())?;
            logged = Some(rec.psl);
        }
        Ok(())
    })
    .unwrap();
    let (restored, manifest) = load_checkpoint(dir.path(), Some(Baseline::Moe)).unwrap();
    assert_eq!(manifest.train.as_ref(), Some(&cfg));
    let (psl, _) = regularizer_values(&restored).unwrap();
    let recomputed = psl.iter().sum::<f64>() / psl.len() as f64;
    assert!((recomputed - logged.unwrap()).abs() <= 1e-5 * logged.unwrap());

    let lines: Vec<serde_json::Value> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), cfg.planned_steps(data.len()));
    for key in ["step", "lm", "psl", "aux", "total", "lr"] {
        assert!(lines[0].get(key).is_some(), "{key}");
    }
}

#[test]
fn non_finite_parameters_abort_training() {
    let data = corpus(4);
    let mut model = moe(6);
    let idx = model.param_info().iter().position(|p| p.name == "routers.0.gate").unwrap();
    model.params_mut()[idx][0] = f64::NAN;
    match train(&tiny_train(6), &data, &mut model) {
        Err(Error::Training(m)) => assert!(m.contains("step 1")),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn corpus_must_match_the_model() {
    let data = corpus(4);
    let no_openness: Vec<DialogueRecord> =
        data.iter().filter(|r| r.trait_id != "O+".parse::<TraitId>().unwrap()).cloned().collect();
    assert!(matches!(train(&tiny_train(0), &no_openness, &mut moe(0)), Err(Error::Config(_))));
    assert!(matches!(train(&tiny_train(0), &[], &mut moe(0)), Err(Error::Config(_))));

    let mut cfg = tiny_model_config();
    cfg.adapter.trait_count = 4;
    let mut per = Model::new(cfg, Baseline::PerTraitLora, 0).unwrap();
    let tc = TrainConfig { baseline: Baseline::PerTraitLora, ..tiny_train(0) };
    assert!(matches!(train(&tc, &data, &mut per), Err(Error::UnknownTrait(_))));

    // Config and model disagree on the regime.
    assert!(matches!(train(&tc, &data, &mut moe(0)), Err(Error::Config(_))));
    assert!(train(&TrainConfig { learning_rate: 0.0, ..tiny_train(0) }, &data, &mut moe(0)).is_err());
}

fn trained(baseline: Baseline) -> Model {
    let cfg = TrainConfig { baseline, max_steps: Some(4), ..tiny_train(7) };
    run_baseline(&cfg, &tiny_model_config(), &corpus(4)).unwrap().0
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    for baseline in [Baseline::Moe, Baseline::SingleLora, Baseline::PerTraitLora] {
        let model = trained(baseline);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, None, dir.path()).unwrap();
        let (back, _) = load_checkpoint(dir.path(), None).unwrap();
        assert_eq!(back.base_checksum(), model.base_checksum());
        let ids = [BOS, 97, 98, 32, 99];
        for t in TraitId::all() {
            let want = model.forward(&ids, t).unwrap();
            let got = back.forward(&ids, t).unwrap();
            assert!(want.max_abs_diff(&got) <= 1e-6, "{baseline} {t}: {}", want.max_abs_diff(&got));
        }
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = trained(Baseline::Moe);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&model, None, dir.path()).unwrap();
    let (manifest_path, tensors_path) = checkpoint_paths(dir.path());
    let good = fs::read(&tensors_path).unwrap();

    fs::write(&tensors_path, &good[..good.len() - 4]).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Checkpoint(m)) if m.contains("checksum")));

    let mut flipped = good.clone();
    flipped[10] ^= 1;
    fs::write(&tensors_path, &flipped).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Checkpoint(_))));
    fs::write(&tensors_path, &good).unwrap();

    let text = fs::read_to_string(&manifest_path).unwrap();
    fs::write(&manifest_path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Checkpoint(m)) if m.contains("corrupt")));

    fs::write(&manifest_path, text.replace("\"format_version\": 1", "\"format_version\": 9")).unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(Error::Checkpoint(m)) if m.contains("version")));

    // A different backbone seed no longer matches the stored base.
    let mut m: serde_json::Value = serde_json::from_str(&text).unwrap();
    m["model"]["base_seed"] = serde_json::json!(77);
    fs::write(&manifest_path, serde_json::to_string(&m).unwrap()).unwrap();
    assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoints_load_only_under_their_own_regime() {
    let all = [Baseline::Moe, Baseline::SingleLora, Baseline::PerTraitLora];
    for saved in all {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&trained(saved), None, dir.path()).unwrap();
        for expected in all {
            let r = load_checkpoint(dir.path(), Some(expected));
            assert_eq!(r.is_ok(), saved == expected, "{saved} loaded as {expected}");
        }
    }
}
