use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use cso_bench::{reference_mdp, reference_uplift};
use cso_core::diagnostics::{
    draw_test_set, exact_g, exact_q, gram_matrix, min_eigenvalue, test_metrics,
};
use cso_core::rng::{self, TRAIN_STREAM};
use cso_core::solver::{initial_state, run, step};
use cso_core::{ProblemOracle, SolverConfig, Vector};

fn single_step(c: &mut Criterion) {
    let problem = reference_mdp(0);
    let config = SolverConfig::reference(0);
    let mut rng = rng::stream(0, TRAIN_STREAM);
    let state = initial_state(&problem, &config).unwrap();
    c.bench_function("mdp_step", |b| {
        b.iter_batched(
            || problem.sample(&mut rng),
            |sample| step(black_box(&state), &sample, &problem, &config).unwrap(),
            BatchSize::SmallInput,
        )
    });

    let uplift = reference_uplift(20, 0);
    let state = initial_state(&uplift, &config).unwrap();
    c.bench_function("uplift_step", |b| {
        b.iter_batched(
            || uplift.sample(&mut rng),
            |sample| step(black_box(&state), &sample, &uplift, &config).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn full_run(c: &mut Criterion) {
    let problem = reference_mdp(0);
    let mut group = c.benchmark_group("mdp_run");
    group.sample_size(10);
    for iterations in [500u64, 5000] {
        let mut config = SolverConfig::reference(0);
        config.iterations = iterations;
        group.bench_with_input(
            BenchmarkId::from_parameter(iterations),
            &config,
            |b, config| b.iter(|| run(&problem, config, &mut []).unwrap()),
        );
    }
    group.finish();
}

fn diagnostics(c: &mut Criterion) {
    let problem = reference_mdp(0);
    let beta = Vector::from_element(10, 0.3);
    let theta = Vector::from_element(10, -0.1);
    c.bench_function("exact_q", |b| {
        b.iter(|| exact_q(&problem, black_box(&beta), black_box(&theta)).unwrap())
    });
    c.bench_function("exact_g", |b| {
        b.iter(|| exact_g(&problem, black_box(&beta)).unwrap())
    });
    c.bench_function("gram_min_eigenvalue", |b| {
        b.iter(|| min_eigenvalue(&gram_matrix(&problem)).unwrap())
    });
    let data = draw_test_set(&problem, 1000, 0);
    c.bench_function("test_metrics_1000", |b| {
        b.iter(|| test_metrics(&problem, &data, black_box(&beta), &theta, 100.0).unwrap())
    });
}

criterion_group!(benches, single_step, full_run, diagnostics);
criterion_main!(benches);
