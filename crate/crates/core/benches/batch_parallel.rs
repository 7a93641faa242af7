//! Sequential vs rayon-parallel execution of the batch-level maps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use persona_core::corpus::{synth_corpus, StyleSpec};
use persona_core::eval::cross_entropy_matrix;
use persona_core::model::{Baseline, Model, ModelConfig};
use persona_core::par::ExecMode;
use persona_core::trainer::{batch_lm_loss, train, TrainConfig};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn bench(c: &mut Criterion) {
    let spec = StyleSpec::standard(1);
    let corpus = synth_corpus(&spec, 4, 2).unwrap();
    let model = Model::new(ModelConfig::default(), Baseline::Moe, 0).unwrap();
    let batch: Vec<_> = corpus.iter().take(16).map(|r| (model.prepare(r, r.trait_id, 192), r.trait_id)).collect();

    let mut group = c.benchmark_group("batch");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::new("lm_loss_16", name), &mode, |b, &mode| {
            b.iter(|| black_box(batch_lm_loss(&model, &batch, mode).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("train_step_16", name), &mode, |b, &mode| {
            let cfg = TrainConfig { max_steps: Some(1), exec: mode, ..TrainConfig::default() };
            b.iter(|| {
                let mut m = model.clone();
                black_box(train(&cfg, &corpus, &mut m).unwrap())
            })
        });
        group.bench_with_input(BenchmarkId::new("ce_matrix_10x10", name), &mode, |b, &mode| {
            let eval: Vec<_> = corpus.iter().step_by(4).cloned().collect();
            b.iter(|| black_box(cross_entropy_matrix(&model, &eval, 192, mode).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
