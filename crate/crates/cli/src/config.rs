use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use schwarz_eig::{ClusterSpec, DomainShape, Parallelism, SolverConfig};
use serde::{Deserialize, Serialize};

/// Finest level accepted on the command line (`2^12` cells per side).
pub const MAX_LEVEL: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

/// Effective configuration of one experiment. Field order is the key order
/// of the config echo in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: DomainShape,
    pub coarse_level: u32,
    /// defaults to `coarse_level + 1`
    pub initial_level: Option<u32>,
    pub fine_level: u32,
    pub overlap_ratio: f64,
    pub m: usize,
    #[serde(rename = "M")]
    pub upper: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub restart_dim: Option<usize>,
    pub shared_shift: bool,
    pub lazy_refactor: f64,
    pub drop_tol: f64,
    pub stall_limit: usize,
    pub sequential: bool,
    pub output_dir: PathBuf,
    pub format: Format,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let solver = SolverConfig::default();
        Self {
            domain: DomainShape::Square,
            coarse_level: 3,
            initial_level: None,
            fine_level: 6,
            overlap_ratio: solver.overlap_ratio,
            m: 99,
            upper: 108,
            tol: solver.tol,
            max_iter: solver.max_iter,
            restart_dim: solver.restart_dim,
            shared_shift: solver.shared_shift,
            lazy_refactor: solver.lazy_refactor,
            drop_tol: solver.drop_tol,
            stall_limit: solver.stall_limit,
            sequential: false,
            output_dir: PathBuf::from("out"),
            format: Format::Csv,
        }
    }
}

/// Experiment flags. Every flag is optional and overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with `key = value` lines using the summary.json key names
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// square or lshape
    #[arg(long)]
    pub domain: Option<DomainShape>,
    /// coarse level jc, H = sqrt(2) pi / 2^jc
    #[arg(long)]
    pub coarse: Option<u32>,
    /// initial level, defaults to coarse + 1
    #[arg(long)]
    pub initial: Option<u32>,
    /// fine level jf
    #[arg(long)]
    pub fine: Option<u32>,
    /// overlap ratio delta / H
    #[arg(long)]
    pub overlap: Option<f64>,
    /// first index of the cluster
    #[arg(long = "m")]
    pub m: Option<usize>,
    /// last index of the cluster
    #[arg(long = "M")]
    pub upper: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// thick restart once the basis exceeds this dimension
    #[arg(long)]
    pub restart_dim: Option<usize>,
    /// one shift (lambda_m) for every correction equation
    #[arg(long)]
    pub shared_shift: bool,
    /// reuse local factorizations while shifts move by at most this much
    #[arg(long)]
    pub lazy_refactor: Option<f64>,
    #[arg(long)]
    pub drop_tol: Option<f64>,
    #[arg(long)]
    pub stall_limit: Option<usize>,
    /// run every parallel loop sequentially
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => read_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! take {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$field = v;
                }
            };
        }
        take!(domain => domain);
        take!(coarse => coarse_level);
        take!(fine => fine_level);
        take!(overlap => overlap_ratio);
        take!(m => m);
        take!(upper => upper);
        take!(tol => tol);
        take!(max_iter => max_iter);
        take!(lazy_refactor => lazy_refactor);
        take!(drop_tol => drop_tol);
        take!(stall_limit => stall_limit);
        take!(output_dir => output_dir);
        take!(format => format);
        if self.initial.is_some() {
            cfg.initial_level = self.initial;
        }
        if self.restart_dim.is_some() {
            cfg.restart_dim = self.restart_dim;
        }
        cfg.shared_shift |= self.shared_shift;
        cfg.sequential |= self.sequential;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_file(path: &Path) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

impl ExperimentConfig {
    pub fn initial(&self) -> u32 {
        self.initial_level.unwrap_or(self.coarse_level + 1)
    }

    pub fn cluster(&self) -> Result<ClusterSpec, String> {
        ClusterSpec::new(self.m, self.upper).map_err(|e| e.to_string())
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            overlap_ratio: self.overlap_ratio,
            restart_dim: self.restart_dim,
            shared_shift: self.shared_shift,
            lazy_refactor: self.lazy_refactor,
            drop_tol: self.drop_tol,
            stall_limit: self.stall_limit,
            parallelism: if self.sequential { Parallelism::Sequential } else { Parallelism::Rayon },
        }
    }

    /// Re-checks every solver precondition that does not need a mesh.
    pub fn validate(&self) -> Result<(), String> {
        let cluster = self.cluster()?;
        let (c, i, f) = (self.coarse_level, self.initial(), self.fine_level);
        if c == 0 {
            return Err("coarse level must be at least 1".into());
        }
        if f > MAX_LEVEL {
            return Err(format!("fine level {f} above the supported maximum {MAX_LEVEL}"));
        }
        if !(c <= i && i <= f && c < f) {
            return Err(format!("levels not nested: coarse {c}, initial {i}, fine {f}"));
        }
        let dofs = self.domain.expected_dofs(i);
        if self.upper > dofs {
            return Err(format!("M = {} exceeds the {dofs} dofs of the initial mesh", self.upper));
        }
        let layers = self.overlap_ratio * (1u64 << (f - c)) as f64;
        if layers < 1.0 - 1e-12 {
            return Err(format!("overlap ratio {} is below one fine layer", self.overlap_ratio));
        }
        if self.stall_limit == 0 {
            return Err("stall_limit must be at least 1".into());
        }
        self.solver().validate(cluster).map_err(|e| e.to_string())
    }
}
