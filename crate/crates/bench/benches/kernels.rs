use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sgflow::{decompose, solve_weights, InitMode, Scheme};
use sgflow_bench::{analytic_cloud, equilibrated_state, simulator};

fn bench_decompose(c: &mut Criterion) {
    let mut g = c.benchmark_group("decompose");
    for (atoms, columns) in [(16, 64), (64, 64), (16, 256)] {
        let sim = simulator(columns, Scheme::Euler).unwrap();
        let state = equilibrated_state(&sim, atoms).unwrap();
        g.bench_with_input(
            BenchmarkId::from_parameter(format!("{atoms}x{columns}")),
            &state,
            |b, s| {
                b.iter(|| decompose(black_box(&s.cloud), black_box(&s.weights), &sim.grid).unwrap())
            },
        );
    }
    g.finish();
}

fn bench_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("solve_weights");
    g.sample_size(10);
    for atoms in [4, 16] {
        let sim = simulator(64, Scheme::Euler).unwrap();
        let cloud = analytic_cloud(&sim, atoms).unwrap();
        let init = InitMode::Quadratic.weights(&cloud);
        g.bench_with_input(BenchmarkId::from_parameter(atoms), &cloud, |b, cl| {
            b.iter(|| solve_weights(black_box(cl), &init, &sim.grid, &sim.settings).unwrap())
        });
    }
    g.finish();
}

fn bench_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("step");
    g.sample_size(10);
    for (name, scheme) in [("euler", Scheme::Euler), ("rk4", Scheme::Rk4)] {
        let sim = simulator(64, scheme).unwrap();
        let state = equilibrated_state(&sim, 16).unwrap();
        g.bench_function(name, |b| b.iter(|| sim.step(black_box(&state)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, bench_decompose, bench_solve, bench_step);
criterion_main!(benches);
