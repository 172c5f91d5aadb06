use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mtmgc_core::dataset::{make_samples, synthesize, Split, SynthConfig};
use mtmgc_core::graphs::{renormalize, GraphSet};
use mtmgc_core::model::{network_forward, Variant};
use mtmgc_core::mtl::{Covariances, FlipFlopConfig};
use mtmgc_core::train::{Learner, MgcLearner, TrainConfig};
use mtmgc_core::{Matrix, Tensor3};

fn filled(r: usize, c: usize, seed: usize) -> Matrix {
    Matrix::from_fn(r, c, |i, j| (((i * 31 + j * 17 + seed) % 97) as f64 / 48.5) - 1.0)
}

fn linear_algebra(c: &mut Criterion) {
    let mut g = c.benchmark_group("numcore");
    let a = filled(1008, 512, 1);
    let b = filled(512, 128, 2);
    g.bench_function("matmul 1008x512x128", |bn| bn.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    let adj = filled(63, 63, 3).map(f64::abs);
    let sym = adj.add(&adj.transpose()).unwrap();
    g.bench_function("renormalize 63", |bn| bn.iter(|| renormalize(black_box(&sym)).unwrap()));
    g.finish();
}

fn covariance(c: &mut Criterion) {
    let w = Tensor3::from_fn([512, 128, 2], |i, j, k| (((i * 7 + j * 13 + k * 5) % 41) as f64 / 20.5) - 1.0);
    let cov = Covariances::identity(0, [512, 128, 2], true, true);
    c.bench_function("j2 512x128x2", |bn| bn.iter(|| cov.j2(black_box(&w)).unwrap()));
    let cfg = FlipFlopConfig::default();
    c.bench_function("flip-flop 512x128x2", |bn| {
        bn.iter(|| {
            let mut cov = cov.clone();
            cov.flip_flop(black_box(&w), &cfg).unwrap()
        })
    });
}

fn network(c: &mut Criterion) {
    let syn = synthesize(
        &SynthConfig {
            n_zones: 63,
            n_hours: 400,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let samples = make_samples(&syn.demand, &Split::default()).unwrap();
    let graphs = GraphSet::build(&syn.zones, &syn.demand, samples.train_window()).unwrap();
    let batch: Vec<usize> = (0..16).collect();
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            variant,
            ..Default::default()
        };
        let learner = MgcLearner::new(&cfg, graphs.clone(), 4).unwrap();
        g.bench_function(format!("{variant} batch gradient, 63 zones, 16 hours"), |bn| {
            bn.iter(|| learner.batch_gradients(&samples.train, black_box(&batch)).unwrap())
        });
    }
    let learner = MgcLearner::new(&TrainConfig::default(), graphs.clone(), 4).unwrap();
    g.bench_function("MGC forward, validation split", |bn| {
        bn.iter(|| network_forward(&learner.network, &graphs, black_box(&samples.validation)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, linear_algebra, covariance, network);
criterion_main!(benches);
