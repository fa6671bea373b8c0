//! Sequential vs rayon execution of the data-parallel hot paths.
//!
//! Run with `cargo bench -p mfm`; with `--no-default-features` both arms
//! execute sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mfm::kernel::{rbf_gram_with, BandwidthSpec};
use mfm::model::{MfmModel, ModelConfig};
use mfm::objective::{batch_loss, LossWeights};
use mfm::synth::{generate_dataset, SynthConfig};
use mfm::{Exec, RngState};

const ARMS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn gram(c: &mut Criterion) {
    let mut g = c.benchmark_group("rbf_gram");
    let mut rng = RngState::new(0);
    for n in [200usize, 1000] {
        let points: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(16)).collect();
        for (name, exec) in ARMS {
            g.bench_with_input(BenchmarkId::new(name, n), &points, |b, p| {
                b.iter(|| rbf_gram_with(black_box(p), BandwidthSpec::fixed(1.0), exec).unwrap())
            });
        }
    }
    g.finish();
}

fn loss(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch_loss");
    g.sample_size(20);
    let cfg = SynthConfig {
        n: 128,
        dims: vec![16, 8],
        steps: vec![1, 6],
        ..SynthConfig::default()
    };
    let data = generate_dataset(&cfg).unwrap().train;
    let model = MfmModel::build(&ModelConfig::default(), &data.specs, data.task, &mut RngState::new(1)).unwrap();
    let weights = LossWeights::default();
    for bs in [32usize, 128] {
        let batch: Vec<_> = data.samples[..bs].iter().collect();
        for (name, exec) in ARMS {
            g.bench_with_input(BenchmarkId::new(name, bs), &batch, |b, batch| {
                b.iter(|| {
                    let mut rng = RngState::new(2);
                    batch_loss(&model, black_box(batch), &weights, &mut rng, exec).unwrap()
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, gram, loss);
criterion_main!(benches);
