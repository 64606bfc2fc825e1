use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stb_core::model::StbConfig;
use stb_core::{Normalizer, StbModel, Tape, Tensor};

fn normalizers(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("normalizer");
    for width in [4usize, 8, 16, 64] {
        let x = Tensor::randn([256, width], 1.0, &mut rng);
        group.bench_with_input(BenchmarkId::new("softmax", width), &x, |b, x| {
            b.iter(|| {
                let mut tape = Tape::new();
                let v = tape.constant(x.clone());
                black_box(tape.softmax(v).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("sparsemax", width), &x, |b, x| {
            b.iter(|| {
                let mut tape = Tape::new();
                let v = tape.constant(x.clone());
                black_box(tape.sparsemax(v).unwrap());
            })
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = Tensor::randn([4, 50, n], 1.0, &mut rng);
        let w = Tensor::randn([n, n], 1.0, &mut rng);
        group.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.param(a.clone()), tape.param(w.clone()));
                let out = tape.matmul(x, y).unwrap();
                let loss = tape.sum(out).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn model(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    for normalizer in [Normalizer::Softmax, Normalizer::Sparsemax] {
        let config = StbConfig {
            normalizer,
            ..StbConfig::default()
        };
        let model = StbModel::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for channels in [2usize, 4, 8] {
            let x = Tensor::randn([channels, config.frames, config.input_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
            group.bench_with_input(BenchmarkId::new(format!("embed/{}", normalizer.name()), channels), &x, |b, x| {
                b.iter(|| black_box(model.embed(x).unwrap()))
            });
        }
        let x = Tensor::randn([config.train_channels, config.frames, config.input_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        group.bench_function(format!("train-step/{}", normalizer.name()), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = model.params.bind(&mut tape);
                let input = tape.constant(x.clone());
                let fwd = model.forward(&mut tape, &p, input).unwrap();
                let logits = model.classify(&mut tape, &p, fwd.embedding).unwrap();
                let loss = tape.cross_entropy(logits, &[0]).unwrap();
                black_box(tape.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, normalizers, matmul, model);
criterion_main!(benches);
