//! Hot-path benchmarks: convolution, warping, orthonormalization and a full
//! training step at a reduced configuration.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use lia_core::graph::Graph;
use lia_core::motion;
use lia_core::tensor::Tensor;
use lia_core::trainer::{DataSpec, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[8, 32, 64, 64], 1.0, &mut rng).with_grad(true);
    let w = Tensor::randn(&[32, 32, 3, 3], 0.05, &mut rng).with_grad(true);
    c.bench_function("conv2d_fwd_8x32x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let wv = g.leaf(&w);
            black_box(g.conv2d(xv, wv, None, 1, 1).unwrap());
        })
    });
    c.bench_function("conv2d_fwd_bwd_8x32x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let wv = g.leaf(&w);
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let l = g.mean_all(y).unwrap();
            black_box(g.backward(l).unwrap());
        })
    });
}

fn bench_warp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feat = Tensor::randn(&[8, 32, 64, 64], 1.0, &mut rng);
    let flow = Tensor::rand_uniform(&[8, 2, 64, 64], -0.5, 0.5, &mut rng);
    c.bench_function("bilinear_warp_8x32x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let f = g.constant(feat.clone());
            let fl = g.constant(flow.clone());
            black_box(g.warp(f, fl).unwrap());
        })
    });
}

fn bench_orthonormalize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = Tensor::randn(&[20, 128], 0.09, &mut rng);
    c.bench_function("orthonormalize_20x128", |b| {
        b.iter(|| black_box(motion::orthonormalize(&raw).unwrap()))
    });
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = TrainConfig {
        latent_dim: 32,
        dict_size: 8,
        batch: 4,
        resolution: 32,
        base_channels: 8,
        max_channels: 32,
        mlp_hidden: 32,
        steps: u64::MAX,
        data: DataSpec::Synthetic { sequences: 4, length: 8 },
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(cfg).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("train_step_res32", |b| b.iter(|| tr.train_step().unwrap()));
    group.finish();
}

criterion_group!(benches, bench_conv2d, bench_warp, bench_orthonormalize, bench_train_step);
criterion_main!(benches);
