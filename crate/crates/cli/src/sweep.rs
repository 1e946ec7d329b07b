use std::fs;
use std::path::PathBuf;
use std::thread;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;

use crate::config::{ExperimentConfig, Format};
use crate::run::{execute, write_outputs, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Fine,
    Coarse,
}

impl Axis {
    fn apply(self, base: &ExperimentConfig, level: u32) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Axis::Fine => cfg.fine_level = level,
            Axis::Coarse => {
                // an explicit initial level only makes sense for one coarse level
                if cfg.initial_level.is_some_and(|i| i <= level) {
                    cfg.initial_level = None;
                }
                cfg.coarse_level = level;
            }
        }
        cfg.output_dir = base.output_dir.join(format!("{}-{level}", self.name()));
        cfg
    }

    fn name(self) -> &'static str {
        match self {
            Axis::Fine => "fine",
            Axis::Coarse => "coarse",
        }
    }
}

/// Expands `5`, `5,6,7` and `5..7` (inclusive) tokens into a level list.
pub fn parse_levels(tokens: &[String]) -> Result<Vec<u32>, String> {
    let mut levels = Vec::new();
    for token in tokens.iter().flat_map(|t| t.split(',')).filter(|t| !t.is_empty()) {
        let bad = || format!("invalid level '{token}'");
        if let Some((a, b)) = token.split_once("..") {
            let a: u32 = a.parse().map_err(|_| bad())?;
            let b: u32 = b.trim_start_matches('=').parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            levels.extend(a..=b);
        } else {
            levels.push(token.parse().map_err(|_| bad())?);
        }
    }
    if levels.is_empty() {
        return Err("sweep needs at least one level to vary".into());
    }
    Ok(levels)
}

pub struct Column {
    pub level: u32,
    pub result: Result<Outcome, String>,
}

impl Column {
    pub fn converged(&self) -> bool {
        matches!(&self.result, Ok(o) if o.report.converged)
    }
}

fn run_one(cfg: ExperimentConfig) -> Result<Outcome, String> {
    cfg.validate()?;
    let out = execute(&cfg).map_err(|e| format!("{e:#}"))?;
    write_outputs(&cfg.output_dir, &out).map_err(|e| format!("{e:#}"))?;
    Ok(out)
}

/// One solve per level, `jobs` at a time. Failures are recorded per column.
pub fn sweep(base: &ExperimentConfig, axis: Axis, levels: &[u32], jobs: usize) -> Vec<Column> {
    let configs: Vec<(u32, ExperimentConfig)> = levels.iter().map(|&l| (l, axis.apply(base, l))).collect();
    let mut columns = Vec::with_capacity(configs.len());
    for chunk in configs.chunks(jobs.max(1)) {
        let results: Vec<Result<Outcome, String>> = thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|(_, cfg)| s.spawn(|| run_one(cfg.clone()))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("solver panicked".to_string())))
                .collect()
        });
        for ((level, _), result) in chunk.iter().zip(results) {
            if let Err(e) = &result {
                eprintln!("{}={level}: {e}", axis.name());
            }
            columns.push(Column { level: *level, result });
        }
    }
    columns
}

/// Table with one column per level and rows `m..M`, `it.`, `stop.`,
/// `converged` and `error`.
pub fn table(base: &ExperimentConfig, axis: Axis, columns: &[Column]) -> Vec<Vec<String>> {
    let mut header = vec!["row".to_string()];
    header.extend(columns.iter().map(|c| format!("{}={}", axis.name(), c.level)));
    let mut rows = vec![header];
    let cell = |f: &dyn Fn(&Outcome) -> String| -> Vec<String> {
        columns.iter().map(|c| c.result.as_ref().map(f).unwrap_or_default()).collect()
    };
    for (k, i) in (base.m..=base.upper).enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(cell(&|o| o.report.values[k].to_string()));
        rows.push(row);
    }
    let mut it = vec!["it.".to_string()];
    it.extend(cell(&|o| o.report.iterations.to_string()));
    let mut stop = vec!["stop.".to_string()];
    stop.extend(cell(&|o| format!("{:.6e}", o.report.stop_norm)));
    let mut conv = vec!["converged".to_string()];
    conv.extend(cell(&|o| o.report.converged.to_string()));
    let mut err = vec!["error".to_string()];
    err.extend(columns.iter().map(|c| c.result.as_ref().err().cloned().unwrap_or_default()));
    rows.extend([it, stop, conv, err]);
    rows
}

pub fn write_table(base: &ExperimentConfig, axis: Axis, columns: &[Column]) -> Result<PathBuf> {
    fs::create_dir_all(&base.output_dir).with_context(|| format!("creating {}", base.output_dir.display()))?;
    let rows = table(base, axis, columns);
    let (path, bytes) = match base.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.write_record(r)?;
            }
            (base.output_dir.join("sweep.csv"), w.into_inner()?)
        }
        Format::Json => (base.output_dir.join("sweep.json"), serde_json::to_vec_pretty(&rows)?),
    };
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
