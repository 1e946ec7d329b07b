//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- 3 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use faer::linalg::solvers::DenseSolveCore;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schwarz_eig::mesh::{build_decomposition, build_hierarchy, build_hierarchy_with_initial, DomainShape, MeshHierarchy};
use schwarz_eig::oracle::{
    cluster_gaps, dense_discrete_eigenpairs, dense_discrete_spectrum, geometric_mean, max_principal_angle_sin,
    smallest_eigenvalue, total_error_ratios, SpectrumReference,
};
use schwarz_eig::schwarz::{prepare, CoarsePiece};
use schwarz_eig::sparse::dot;
use schwarz_eig::{
    assemble, build_mesh, factorize_symmetric, solve, ClusterSpec, Parallelism, SolverConfig, SolverReport,
    SparsePencil,
};

type Outcome = Result<String, String>;

const GOLDEN: [f64; 10] = [
    145.267540, 145.267710, 145.285465, 145.497479, 146.343640, 146.343692, 148.289692, 148.289716, 149.391777,
    149.414814,
];
const INITIAL: [f64; 10] = [
    161.042017, 162.829383, 162.842389, 166.819972, 166.865099, 167.540267, 169.887856, 170.700726, 173.459262,
    174.709492,
];

struct Run {
    hier: MeshHierarchy,
    pencil: SparsePencil,
    report: SolverReport,
}

fn run(shape: DomainShape, coarse: u32, initial: u32, fine: u32, cluster: (usize, usize)) -> Run {
    let hier = build_hierarchy_with_initial(shape, coarse, initial, fine).unwrap();
    let pencil = assemble(&hier.fine);
    let decomp = build_decomposition(&hier, 0.25).unwrap();
    let cluster = ClusterSpec::new(cluster.0, cluster.1).unwrap();
    let report = solve(&hier, &pencil, &decomp, cluster, &SolverConfig::default()).unwrap();
    Run { hier, pencil, report }
}

fn golden_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| run(DomainShape::Square, 5, 5, 8, (99, 108)))
}

fn small_square() -> &'static (Run, SpectrumReference) {
    static RUN: OnceLock<(Run, SpectrumReference)> = OnceLock::new();
    RUN.get_or_init(|| {
        let r = run(DomainShape::Square, 3, 4, 6, (99, 108));
        let refs = dense_discrete_eigenpairs(&r.pencil, 109, 98..108).unwrap();
        (r, refs)
    })
}

fn cluster_21_26(coarse: u32, fine: u32) -> usize {
    static RUNS: OnceLock<std::sync::Mutex<Vec<((u32, u32), usize)>>> = OnceLock::new();
    let cache = RUNS.get_or_init(Default::default);
    if let Some(&(_, it)) = cache.lock().unwrap().iter().find(|(k, _)| *k == (coarse, fine)) {
        return it;
    }
    let r = run(DomainShape::Square, coarse, coarse + 1, fine, (21, 26));
    assert!(r.report.converged, "coarse {coarse} fine {fine} did not converge");
    cache.lock().unwrap().push(((coarse, fine), r.report.iterations));
    r.report.iterations
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let same = golden_run();
    let halved = run(DomainShape::Square, 5, 6, 8, (99, 108));
    for (label, r) in [("H~=H", same), ("H~=H/2", &halved)] {
        let dev = max_dev(&r.report.values, &GOLDEN);
        let good = r.report.converged && dev <= 5e-4 && r.report.iterations <= 54 && r.pencil.n() == 65025;
        ok &= good;
        notes.push(format!(
            "{label}: {} dofs, {} it (limit 54), stop {:.3e}, max |dev| {dev:.2e}",
            r.pencil.n(),
            r.report.iterations,
            r.report.stop_norm
        ));
    }
    if ok { Ok(notes.join("; ")) } else { Err(notes.join("; ")) }
}

fn criterion_2() -> Outcome {
    let r = golden_run();
    let dev = max_dev(&r.report.initial_values, &INITIAL);
    let detail = format!("initial mesh {} dofs, max |dev| {dev:.2e} (tol 5e-6)", r.hier.initial.n_dofs());
    if dev <= 5e-6 && r.hier.initial.n_dofs() == 961 { Ok(detail) } else { Err(detail) }
}

fn criterion_3() -> Outcome {
    let (r, refs) = small_square();
    let rel = r
        .report
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| ((v - refs.values[98 + k]) / refs.values[98 + k]).abs())
        .fold(0.0, f64::max);
    // multiplets of the continuous problem: 145 x4, 146 x2, 148 x2, 149 x2
    let groups = [(0, 4), (4, 6), (6, 8), (8, 10)];
    let mut worst: f64 = 0.0;
    for (a, b) in groups {
        let s = max_principal_angle_sin(&r.report.vectors[a..b], &refs.vectors[a..b], &r.pencil.mass);
        worst = worst.max(s);
    }
    let detail = format!(
        "{} dofs, {} it, max rel err {rel:.2e} (tol 1e-8), max sin angle {worst:.2e} (tol 1e-4)",
        r.pencil.n(),
        r.report.iterations
    );
    if r.report.converged && rel <= 1e-8 && worst <= 1e-4 { Ok(detail) } else { Err(detail) }
}

fn criterion_4() -> Outcome {
    let instances = [
        (DomainShape::Square, 2, 4, (2, 5)),
        (DomainShape::Square, 3, 5, (5, 8)),
        (DomainShape::Square, 2, 5, (10, 14)),
        (DomainShape::LShape, 2, 4, (3, 6)),
        (DomainShape::LShape, 3, 5, (41, 47)),
    ];
    let mut worst_lower: f64 = f64::INFINITY;
    let mut worst_rise: f64 = f64::NEG_INFINITY;
    let mut ok = true;
    for (shape, c, f, cl) in instances {
        let r = run(shape, c, c + 1, f, cl);
        let exact = dense_discrete_spectrum(&r.pencil, cl.1).unwrap();
        ok &= r.report.converged;
        let rows: Vec<Vec<f64>> = r
            .report
            .trace
            .iter()
            .map(|t| t.lower_values.iter().chain(&t.values).copied().collect())
            .collect();
        for row in &rows {
            for (v, e) in row.iter().zip(&exact.values) {
                worst_lower = worst_lower.min(v - e);
            }
        }
        for w in rows.windows(2) {
            for (next, prev) in w[1].iter().zip(&w[0]) {
                worst_rise = worst_rise.max(next - prev);
            }
        }
    }
    ok &= worst_lower >= -1e-10 && worst_rise <= 1e-12;
    let detail = format!(
        "5 instances, min (lambda^k - lambda^h) {worst_lower:.2e} (>= -1e-10), max rise {worst_rise:.2e} (<= 1e-12)"
    );
    if ok { Ok(detail) } else { Err(detail) }
}

fn criterion_5() -> Outcome {
    let (r, refs) = small_square();
    let exact = &refs.values[98..108];
    let floor = 1e-12 * exact.iter().sum::<f64>();
    let history = r.report.value_history();
    // ratios e_{k+1}/e_k for k >= 1
    let ratios = total_error_ratios(&history[1..], exact, floor);
    let gamma = geometric_mean(&ratios);
    let max = ratios.iter().copied().fold(0.0, f64::max);
    let detail = format!("{} ratios above floor {floor:.1e}, max {max:.4}, gamma {gamma:.4?}", ratios.len());
    match gamma {
        Some(g) if max < 1.0 && g < 0.9 && ratios.len() >= 2 => Ok(detail),
        _ => Err(detail),
    }
}

/// Cluster (21,26) is separated from its neighbours on a fine level: gaps
/// from the dense oracle where affordable, inertia counts otherwise.
fn check_gaps(fine: u32, h6: &SpectrumReference) -> Result<String, String> {
    let pencil = assemble(&build_mesh(DomainShape::Square, fine).unwrap());
    let cluster = ClusterSpec::new(21, 26).unwrap();
    if pencil.n() <= 5000 {
        let refs = dense_discrete_spectrum(&pencil, 27).unwrap();
        let g = cluster_gaps(&refs, cluster).unwrap();
        return match g.warning {
            None => Ok(format!("gaps ({:.3}, {:.3})", g.left, g.right)),
            Some(w) => Err(w),
        };
    }
    // λ^h is non-increasing under refinement and bounded below by λ, so
    // shifts between the level-6 values and the analytic neighbours separate
    // the cluster on any finer level
    let lo = 0.5 * (h6.value(20) + 34.0);
    let hi = 0.5 * (h6.value(26) + 41.0);
    let below = |s: f64| factorize_symmetric(&pencil.shifted(s)).ok().and_then(|f| f.negative_eigenvalues());
    match (below(lo), below(hi)) {
        (Some(20), Some(26)) => Ok(format!("inertia 20 below {lo:.2}, 26 below {hi:.2}")),
        other => Err(format!("inertia counts {other:?}")),
    }
}

fn criterion_6() -> Outcome {
    let h6 = dense_discrete_spectrum(&assemble(&build_mesh(DomainShape::Square, 6).unwrap()), 27).unwrap();
    let mut gaps = Vec::new();
    for fine in [5, 6, 7] {
        gaps.push(check_gaps(fine, &h6)?);
    }
    let its: Vec<usize> = [5, 6, 7].iter().map(|&f| cluster_21_26(3, f)).collect();
    let spread = its.iter().max().unwrap() - its.iter().min().unwrap();
    let detail = format!("iterations {its:?} for fine 5,6,7 (spread {spread} <= 3); {}", gaps.join(", "));
    if spread <= 3 { Ok(detail) } else { Err(detail) }
}

fn criterion_7() -> Outcome {
    let its: Vec<usize> = [3, 4, 5].iter().map(|&c| cluster_21_26(c, 7)).collect();
    let ok = its.windows(2).all(|w| w[1] <= w[0] + 1);
    let detail = format!("iterations {its:?} for coarse 3,4,5 at fine 7");
    if ok { Ok(detail) } else { Err(detail) }
}

fn criterion_8() -> Outcome {
    let hier = build_hierarchy(DomainShape::Square, 2, 4).unwrap();
    let pencil = assemble(&hier.fine);
    let decomp = build_decomposition(&hier, 0.25).unwrap();
    let cut = 3;
    let shift = 7.5;
    let coarse = Arc::new(CoarsePiece::build(&hier, cut).unwrap());
    let prec = prepare(&pencil, &decomp, coarse, &[shift], Parallelism::Sequential).unwrap();
    let n = pencil.n();

    let mut dense = Mat::<f64>::zeros(n, n);
    for set in &decomp.subdomains {
        let inv = pencil.principal_subpencil(set).shifted(shift).to_dense().partial_piv_lu().inverse();
        for (a, &ga) in set.iter().enumerate() {
            for (c, &gc) in set.iter().enumerate() {
                dense[(ga, gc)] += inv[(a, c)];
            }
        }
    }
    let coarse_pencil = assemble(&hier.coarse);
    let nh = coarse_pencil.n();
    let refs = dense_discrete_eigenpairs(&coarse_pencil, nh, 0..nh).unwrap();
    for j in cut..nh {
        let pu = hier.prolong_coarse.mul_vec(&refs.vectors[j]);
        let w = 1.0 / (refs.values[j] - shift);
        for a in 0..n {
            for c in 0..n {
                dense[(a, c)] += w * pu[a] * pu[c];
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut rand_vec = || -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let mut equiv: f64 = 0.0;
    for _ in 0..5 {
        let rho = rand_vec();
        let t = prec.apply(&rho, 0).unwrap();
        let expected: Vec<f64> = (0..n).map(|i| (0..n).map(|j| dense[(i, j)] * rho[j]).sum()).collect();
        let scale = expected.iter().fold(1.0f64, |a, x| a.max(x.abs()));
        equiv = equiv.max(max_dev(&t, &expected) / scale);
    }
    let mut sym: f64 = 0.0;
    for _ in 0..20 {
        let (r1, r2) = (rand_vec(), rand_vec());
        let a = dot(&r1, &prec.apply(&r2, 0).unwrap());
        let b = dot(&r2, &prec.apply(&r1, 0).unwrap());
        sym = sym.max((a - b).abs() / a.abs().max(b.abs()));
    }
    let detail = format!("dense equivalence {equiv:.2e} (tol 1e-9), symmetry {sym:.2e} (tol 1e-10)");
    if equiv <= 1e-9 && sym <= 1e-10 { Ok(detail) } else { Err(detail) }
}

fn criterion_9() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (shape, level, expected) in
        [(DomainShape::Square, 8, 65025), (DomainShape::Square, 9, 261121), (DomainShape::LShape, 7, 48641)]
    {
        let n = build_mesh(shape, level).unwrap().n_dofs();
        ok &= n == expected;
        notes.push(format!("{shape} {level}: {n}"));
    }

    let mut worst_row: f64 = 0.0;
    for (shape, level) in [(DomainShape::Square, 8), (DomainShape::LShape, 7)] {
        let mesh = build_mesh(shape, level).unwrap();
        let p = assemble(&mesh);
        let g2 = mesh.spacing() * mesh.spacing();
        for d in 0..mesh.n_dofs() {
            let (i, j) = mesh.dof_lattice(d);
            let interior = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)]
                .iter()
                .all(|&(di, dj)| mesh.dof_at((i as i64 + di) as usize, (j as i64 + dj) as usize).is_some());
            if interior {
                let sum: f64 = p.mass.row(d).1.iter().sum();
                worst_row = worst_row.max((sum - g2).abs() / g2);
            }
        }
    }
    ok &= worst_row <= 1e-12;
    notes.push(format!("mass row sums rel dev {worst_row:.1e}"));

    let errors: Vec<f64> = (4..=7)
        .map(|l| smallest_eigenvalue(&assemble(&build_mesh(DomainShape::Square, l).unwrap()), 1e-14).unwrap() - 2.0)
        .collect();
    let rates: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let overall = (errors[0] / errors[3]).log2() / 3.0;
    ok &= (overall - 2.0).abs() <= 0.1;
    notes.push(format!("lambda_1 rates {rates:.3?}, overall {overall:.3} (2.0 +- 0.1)"));
    if ok { Ok(notes.join("; ")) } else { Err(notes.join("; ")) }
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "golden table", criterion_1),
        (2, "initialization fidelity", criterion_2),
        (3, "oracle equivalence", criterion_3),
        (4, "lower bound and monotonicity", criterion_4),
        (5, "geometric decay", criterion_5),
        (6, "h-robustness", criterion_6),
        (7, "H-scalability", criterion_7),
        (8, "preconditioner correctness", criterion_8),
        (9, "mesh and assembly", criterion_9),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {id} ({name}) [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}) [{secs:.1}s]: {d}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
