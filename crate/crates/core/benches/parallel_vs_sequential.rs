use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use echo_contrast::evaluation::knn_classify;
use echo_contrast::guideline::GuidelineTable;
use echo_contrast::negation::NegationRules;
use echo_contrast::synthetic::{generate, SamplePair, Split, SyntheticSpec};
use echo_contrast::training::{build_vocab, train_step_with_lr, TrainBatch, TrainConfig, TrainState};
use echo_contrast::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn corpus() -> Vec<SamplePair> {
    let spec = SyntheticSpec {
        n_samples: 1200,
        ..SyntheticSpec::default()
    };
    generate(&spec, GuidelineTable::builtin(), NegationRules::builtin(), Exec::Parallel).unwrap()
}

fn bench_train_step(c: &mut Criterion) {
    let rows = corpus();
    let train: Vec<SamplePair> = rows.into_iter().filter(|r| r.split == Split::Train).collect();
    let state = TrainState::init(TrainConfig::synthetic(), build_vocab(&train)).unwrap();
    let data = TrainBatch::from_pairs(&train, &state.vocab).unwrap();
    let mut group = c.benchmark_group("train_step");
    for batch in [64usize, 512] {
        let idx: Vec<usize> = (0..batch).collect();
        let b = data.select(&idx);
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, batch), &b, |bench, b| {
                let mut s = state.clone();
                bench.iter(|| train_step_with_lr(&mut s, black_box(b), 1e-4, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let spec = SyntheticSpec {
        n_samples: 1000,
        ..SyntheticSpec::default()
    };
    let mut group = c.benchmark_group("generate");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| generate(black_box(&spec), GuidelineTable::builtin(), NegationRules::builtin(), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_knn(c: &mut Criterion) {
    let rows = corpus();
    let state = TrainState::init(TrainConfig::synthetic(), build_vocab(&rows)).unwrap();
    let images: Vec<_> = rows.iter().map(|r| r.image().unwrap()).collect();
    let z = state.encoder.encode_images(&images, Exec::Parallel).unwrap();
    let labels: Vec<u32> = rows.iter().map(|r| r.view).collect();
    let queries = state.encoder.encode_images(&images[..300], Exec::Parallel).unwrap();
    let mut group = c.benchmark_group("knn_classify");
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| knn_classify(&z, &labels, black_box(&queries), 20, 0.07, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_train_step, bench_generate, bench_knn
}
criterion_main!(benches);
