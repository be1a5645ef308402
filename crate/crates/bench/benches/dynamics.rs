use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use plateau_bench::{macro_fixture, reference_spectrum, sim_config};
use plateau_core::macroscopic::derivative;
use plateau_core::micro::{init_weights, sample_input, sgd_step};
use plateau_core::rng;

fn ode_rhs(c: &mut Criterion) {
    let mut group = c.benchmark_group("derivative");
    for k in [2, 4] {
        let (state, config) = macro_fixture(k, k);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| derivative(black_box(&state), &config))
        });
    }
    group.finish();
}

fn sgd(c: &mut Criterion) {
    let mut group = c.benchmark_group("sgd_step");
    for n in [1_000, 10_000] {
        let cfg = sim_config(n);
        let mut w = init_weights(&cfg).unwrap();
        let sd: Vec<f64> = reference_spectrum().realize(n).unwrap().iter().map(|l| l.sqrt()).collect();
        let mut xi = vec![0.0; n];
        let mut rng = rng::input_stream(cfg.seed);
        group.bench_with_input(BenchmarkId::new("step", n), &n, |b, _| {
            b.iter(|| sgd_step(&mut w, black_box(&xi), &cfg))
        });
        group.bench_with_input(BenchmarkId::new("sample_and_step", n), &n, |b, _| {
            b.iter(|| {
                sample_input(&mut rng, &sd, &mut xi);
                sgd_step(&mut w, &xi, &cfg)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, ode_rhs, sgd);
criterion_main!(benches);
