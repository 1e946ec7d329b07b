use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use schwarz_eig::eigensolver::PhaseTimings;
use schwarz_eig::oracle::{dense_discrete_spectrum, geometric_mean, total_error_ratios};
use schwarz_eig::{
    assemble, build_decomposition, build_hierarchy_with_initial, solve, SolverReport, TraceRecord,
};
use serde::Serialize;

use crate::config::{ExperimentConfig, Format};

/// Largest fine problem for which the dense oracle spectrum is computed.
pub const ORACLE_LIMIT: usize = 5000;

pub struct Outcome {
    pub config: ExperimentConfig,
    pub dofs: usize,
    pub report: SolverReport,
    /// `λ_m^h..λ_M^h` from the dense oracle
    pub oracle: Option<Vec<f64>>,
    pub gamma: Option<f64>,
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome> {
    let cluster = cfg.cluster().map_err(anyhow::Error::msg)?;
    let hier = build_hierarchy_with_initial(cfg.domain, cfg.coarse_level, cfg.initial(), cfg.fine_level)?;
    let pencil = assemble(&hier.fine);
    let decomp = build_decomposition(&hier, cfg.overlap_ratio)?;
    let report = solve(&hier, &pencil, &decomp, cluster, &cfg.solver())?;
    let oracle = if pencil.n() <= ORACLE_LIMIT {
        let refs = dense_discrete_spectrum(&pencil, cfg.upper)?;
        Some(refs.values[cfg.m - 1..cfg.upper].to_vec())
    } else {
        None
    };
    let gamma = oracle.as_ref().and_then(|exact| {
        // errors below this floor are rounding noise of the two eigensolvers
        let floor = 1e-12 * exact.iter().sum::<f64>();
        let history = report.value_history();
        geometric_mean(&total_error_ratios(history.get(1..).unwrap_or(&[]), exact, floor))
    });
    // echo the defaulted initial level explicitly
    let config = ExperimentConfig { initial_level: Some(cfg.initial()), ..cfg.clone() };
    Ok(Outcome { config, dofs: pencil.n(), report, oracle, gamma })
}

#[derive(Serialize)]
struct Summary<'a> {
    config: &'a ExperimentConfig,
    dofs: usize,
    subdomains: usize,
    converged: bool,
    stagnated: bool,
    iterations: usize,
    stop_norm: f64,
    gamma: Option<f64>,
    values: &'a [f64],
    initial_values: &'a [f64],
    oracle_values: Option<&'a [f64]>,
    basis_history: Vec<usize>,
    local_factorizations: usize,
    indefinite_locals: usize,
    timings: &'a PhaseTimings,
}

#[derive(Serialize)]
struct FinalRow {
    i: usize,
    lambda: f64,
    oracle_lambda: Option<f64>,
    abs_err: Option<f64>,
}

fn final_rows(out: &Outcome) -> Vec<FinalRow> {
    out.report
        .values
        .iter()
        .enumerate()
        .map(|(k, &lambda)| {
            let oracle_lambda = out.oracle.as_ref().map(|o| o[k]);
            FinalRow { i: out.config.m + k, lambda, oracle_lambda, abs_err: oracle_lambda.map(|o| (lambda - o).abs()) }
        })
        .collect()
}

fn trace_csv(config: &ExperimentConfig, trace: &[TraceRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["k".to_string()];
    header.extend((config.m..=config.upper).map(|i| format!("lambda_{i}")));
    header.extend(["stop_norm".to_string(), "wall_ms".to_string()]);
    w.write_record(&header)?;
    for r in trace {
        let mut row = vec![r.k.to_string()];
        row.extend(r.values.iter().map(|v| v.to_string()));
        row.push(format!("{:.9e}", r.stop_norm));
        row.push(format!("{:.3}", r.wall_ms));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

fn final_csv(rows: &[FinalRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["i", "lambda", "oracle_lambda", "abs_err"])?;
    for r in rows {
        let opt = |v: Option<f64>, f: fn(f64) -> String| v.map(f).unwrap_or_default();
        w.write_record([
            r.i.to_string(),
            r.lambda.to_string(),
            opt(r.oracle_lambda, |v| v.to_string()),
            opt(r.abs_err, |v| format!("{v:.6e}")),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Writes the trace, final values and summary of one run into `dir`.
pub fn write_outputs(dir: &Path, out: &Outcome) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let write = |name: &str, bytes: Vec<u8>| {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    };
    let rows = final_rows(out);
    match out.config.format {
        Format::Csv => {
            write("trace.csv", trace_csv(&out.config, &out.report.trace)?)?;
            write("final.csv", final_csv(&rows)?)?;
        }
        Format::Json => {
            write("trace.json", serde_json::to_vec_pretty(&out.report.trace)?)?;
            write("final.json", serde_json::to_vec_pretty(&rows)?)?;
        }
    }
    let r = &out.report;
    let summary = Summary {
        config: &out.config,
        dofs: out.dofs,
        subdomains: r.subdomains,
        converged: r.converged,
        stagnated: r.stagnated,
        iterations: r.iterations,
        stop_norm: r.stop_norm,
        gamma: out.gamma,
        values: &r.values,
        initial_values: &r.initial_values,
        oracle_values: out.oracle.as_deref(),
        basis_history: r.basis_history(),
        local_factorizations: r.local_factorizations,
        indefinite_locals: r.indefinite_locals,
        timings: &r.timings,
    };
    write("summary.json", serde_json::to_vec_pretty(&summary)?)
}
