//! Sequential against rayon execution of the preconditioner setup, one
//! application, the residual stop norm and a short solve. Build with
//! `--no-default-features` to see the rayon variant fall back to plain loops.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use schwarz_eig::eigensolver::{residual_dual, stop_norm_of};
use schwarz_eig::schwarz::{prepare, CoarsePiece};
use schwarz_eig::{
    assemble, build_decomposition, build_hierarchy, factorize, solve, ClusterSpec, DomainShape, Parallelism,
    SolverConfig,
};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn preconditioner(c: &mut Criterion) {
    let hier = build_hierarchy(DomainShape::Square, 3, 6).unwrap();
    let pencil = assemble(&hier.fine);
    let decomp = build_decomposition(&hier, 0.25).unwrap();
    let coarse = Arc::new(CoarsePiece::build(&hier, 20).unwrap());
    let shifts = [30.0, 31.0, 32.0, 33.0];
    let rho: Vec<f64> = (0..pencil.n()).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect();

    let mut group = c.benchmark_group("prepare");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| prepare(&pencil, &decomp, coarse.clone(), &shifts, par).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("apply");
    for (name, par) in MODES {
        let prec = prepare(&pencil, &decomp, coarse.clone(), &shifts, par).unwrap();
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| prec.apply(&rho, 0).unwrap()));
    }
    group.finish();

    let mass = factorize(&pencil.mass, true).unwrap();
    let residuals: Vec<Vec<f64>> = (0..8).map(|k| residual_dual(&pencil, 30.0 + k as f64, &rho)).collect();
    let mut group = c.benchmark_group("stop_norm");
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| stop_norm_of(&residuals, &mass, par)));
    }
    group.finish();
}

fn short_solve(c: &mut Criterion) {
    let hier = build_hierarchy(DomainShape::LShape, 2, 5).unwrap();
    let pencil = assemble(&hier.fine);
    let decomp = build_decomposition(&hier, 0.25).unwrap();
    let cluster = ClusterSpec::new(3, 6).unwrap();
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    for (name, par) in MODES {
        let config = SolverConfig { parallelism: par, max_iter: 5, ..SolverConfig::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| solve(&hier, &pencil, &decomp, cluster, &config).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, preconditioner, short_solve);
criterion_main!(benches);
