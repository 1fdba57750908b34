use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fracmf::core_model::{build_grid, riccati};
use fracmf::fbm_paths::NoiseSource;
use fracmf::frac_ops::KernelMatrix;
use fracmf::mf_solver::solve_mean_field;
use fracmf::sensitivity::{bel_weight, law_derivative_solve};
use fracmf::Ensemble;

fn kernel(c: &mut Criterion) {
    let mut g = c.benchmark_group("kernel_build");
    g.sample_size(10);
    for n in [128, 256, 512] {
        let grid = build_grid(n, 1.0).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &grid, |b, grid| b.iter(|| KernelMatrix::new(*grid, 0.7).unwrap()));
    }
    g.finish();
}

fn paths(c: &mut Criterion) {
    let src = NoiseSource::new(build_grid(256, 1.0).unwrap(), 0.7, 1).unwrap();
    let mut p = 0;
    c.bench_function("path_sample_n256", |b| {
        b.iter(|| {
            p += 1;
            src.path(p)
        })
    });
}

fn solve(c: &mut Criterion) {
    let spec = riccati(0.7, 0.2, 0.5, 1.0, 0.3).unwrap();
    let src = NoiseSource::new(build_grid(128, 1.0).unwrap(), 0.7, 3).unwrap();
    let ens = Arc::new(Ensemble::new(&spec, src, 2000).unwrap());
    let mut g = c.benchmark_group("solve_n128_2000_paths");
    g.sample_size(10);
    g.bench_function("picard", |b| b.iter(|| solve_mean_field(&spec, ens.clone(), 1e-10, 200).unwrap()));
    let sol = solve_mean_field(&spec, ens.clone(), 1e-10, 200).unwrap();
    g.bench_function("law_derivative", |b| b.iter(|| law_derivative_solve(&sol, 1e-10, 200).unwrap()));
    let dc = law_derivative_solve(&sol, 1e-10, 200).unwrap();
    g.bench_function("weights", |b| b.iter(|| (0..2000).map(|p| bel_weight(&sol, &dc, p, 128).unwrap().total).sum::<f64>()));
    g.finish();
}

criterion_group!(benches, kernel, paths, solve);
criterion_main!(benches);
