use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use maet_bench::{bump_sigma, mean_operator, rotational_field};
use maet_core::current_recovery::NewtonianKernel;
use maet_core::elliptic::{NeumannOperator, SolverOptions};
use maet_core::Grid3;

fn neumann(c: &mut Criterion) {
    let mut group = c.benchmark_group("neumann_solve");
    group.sample_size(10);
    for n in [17, 33] {
        let g = Grid3::unit_cube(n).unwrap();
        let op = NeumannOperator::new(&bump_sigma(g));
        let f = rotational_field(g);
        let opts = SolverOptions::with_tol(1e-8);
        group.bench_function(format!("{n}^3"), |b| b.iter(|| op.solve(black_box(&f), &opts).unwrap()));
    }
    group.finish();
}

fn spherical_means(c: &mut Criterion) {
    let mut group = c.benchmark_group("spherical_mean_operator");
    group.sample_size(10);
    let op = mean_operator(32, 32, 48);
    let x = vec![1.0; op.cols()];
    let y = vec![1.0; op.rows()];
    group.bench_function("apply 32^3", |b| b.iter(|| op.apply(black_box(&x))));
    group.bench_function("transpose 32^3", |b| b.iter(|| op.apply_transpose(black_box(&y))));
    group.finish();
}

fn newtonian(c: &mut Criterion) {
    let mut group = c.benchmark_group("newtonian_kernel");
    group.sample_size(10);
    for n in [24, 48] {
        let g = Grid3::unit_cube(n).unwrap();
        let kernel = NewtonianKernel::new(g);
        let f = vec![1.0; g.len()];
        group.bench_function(format!("{n}^3"), |b| b.iter(|| kernel.apply(black_box(&f))));
    }
    group.finish();
}

criterion_group!(benches, neumann, spherical_means, newtonian);
criterion_main!(benches);
