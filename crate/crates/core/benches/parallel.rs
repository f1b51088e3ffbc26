use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mvhgnn::data::synth::{generate, SynthConfig};
use mvhgnn::data::{make_splits, SplitMode};
use mvhgnn::diagnostics::{gradient_suite, SuiteModule};
use mvhgnn::encoder::EncoderConfig;
use mvhgnn::metrics::{compute_metrics, RetrievalRun};
use mvhgnn::train::{train, Strategy, TrainConfig, TrainData};
use mvhgnn::{Execution, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn modes() -> Vec<Execution> {
    if Execution::available() {
        vec![Execution::Sequential, Execution::Parallel]
    } else {
        vec![Execution::Sequential]
    }
}

fn small_data() -> mvhgnn::data::Dataset {
    let cfg = SynthConfig {
        classes: 4,
        shapes_per_class: 12,
        sketches_per_class: 8,
        ..SynthConfig::default()
    };
    generate(&cfg, Execution::Sequential).unwrap()
}

fn synth(c: &mut Criterion) {
    let cfg = SynthConfig {
        shapes_per_class: 10,
        ..SynthConfig::default()
    };
    let mut g = c.benchmark_group("generate");
    g.sample_size(10);
    for exec in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| b.iter(|| generate(&cfg, e).unwrap()));
    }
    g.finish();
}

fn embed(c: &mut Criterion) {
    let ds = small_data();
    let splits = make_splits(&ds, &SplitMode::Category, 0).unwrap();
    let data = TrainData::new(&ds, &splits).unwrap();
    let model = data.init_model(EncoderConfig::new(ds.feature_dim(), 64, ds.rig.len()), 64, 0).unwrap();
    let views: Vec<_> = ds.shapes.iter().map(|s| &s.views).collect();
    let mut g = c.benchmark_group("embed_48_shapes");
    g.sample_size(10);
    for exec in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| b.iter(|| model.embed_shapes(&views, e).unwrap()));
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let ds = small_data();
    let splits = make_splits(&ds, &SplitMode::Category, 0).unwrap();
    let data = TrainData::new(&ds, &splits).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train_one_epoch_per_stage");
    g.sample_size(10);
    for exec in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| {
                let enc = EncoderConfig::new(ds.feature_dim(), 64, ds.rig.len());
                train(&data, enc, 64, &cfg, Strategy::TwoStage, e).unwrap()
            })
        });
    }
    g.finish();
}

fn gradients(c: &mut Criterion) {
    let mut g = c.benchmark_group("gradient_suite_losses");
    g.sample_size(10);
    for exec in modes() {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| gradient_suite(&[SuiteModule::Losses], 4, e).unwrap())
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |rows: usize| Matrix::from_vec(rows, 64, (0..rows * 64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let run = RetrievalRun::new(random(400), (0..400).map(|i| i % 20).collect(), random(2000), (0..2000).map(|i| i % 20).collect()).unwrap();
    c.bench_function("metrics_400x2000", |b| b.iter(|| compute_metrics(&run).unwrap()));
}

criterion_group!(benches, synth, embed, training, gradients, metrics);
criterion_main!(benches);
