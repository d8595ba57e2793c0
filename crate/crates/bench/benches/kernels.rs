use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hyrec_bench::{bump_coefficients, bump_measurements};
use hyrec_core::diff::hessian;
use hyrec_core::forward::{BoundaryTrace, ForwardSolver};
use hyrec_core::recon::{reconstruct, ReconSettings};
use hyrec_core::{Grid, ScalarField};

fn forward_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_solve");
    group.sample_size(10);
    for n in [33, 65] {
        let co = bump_coefficients(n);
        let f = BoundaryTrace::from_expr(co.grid(), "x*y").unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| ForwardSolver::new(&co, &Default::default()).unwrap().solve(&f).unwrap())
        });
    }
    group.finish();
}

fn hessian_stencil(c: &mut Criterion) {
    let g = Grid::unit(2, 129).unwrap();
    let f = ScalarField::from_real(&g, |x| (3.0 * x[0]).sin() * (2.0 * x[1]).cos());
    c.bench_function("hessian_129", |b| b.iter(|| hessian(&f)));
}

fn alpha_reconstruction(c: &mut Criterion) {
    let ms = bump_measurements(65);
    let settings = ReconSettings::default();
    let mut group = c.benchmark_group("reconstruct");
    group.sample_size(10);
    group.bench_function("alpha_beta_65", |b| b.iter(|| reconstruct(&ms, &settings).unwrap()));
    group.finish();
}

criterion_group!(kernels, forward_solve, hessian_stencil, alpha_reconstruction);
criterion_main!(kernels);
