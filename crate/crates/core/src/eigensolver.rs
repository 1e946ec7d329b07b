//! Block Jacobi–Davidson iteration with a growing trial subspace.
//!
//! Each iteration solves one preconditioned correction equation per targeted
//! eigenvalue, appends the `M`-orthogonalized corrections to the trial basis
//! and recomputes Ritz pairs. Convergence is declared when the `M⁻¹`-norm of
//! the stacked residual dual vectors drops below `tol`.

use std::sync::Arc;
use std::time::Instant;

use faer::Mat;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fem::{assemble, SparsePencil};
use crate::linalg::{block_dots, dense_generalized_eig, dense_symmetric_eig, factorize, Factorization, MassBasis, DEFAULT_DROP_TOL};
use crate::mesh::{Decomposition, MeshHierarchy};
use crate::parallel::{map_indexed, Parallelism};
use crate::schwarz::{local_pieces, CoarsePiece, SchwarzPreconditioner, ShiftDiagnostics};
use crate::sparse::{axpy, dot};

/// Targeted eigenvalues `λ_m ≤ … ≤ λ_M` by 1-based index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub m: usize,
    #[serde(rename = "M")]
    pub upper: usize,
}

impl ClusterSpec {
    pub fn new(m: usize, upper: usize) -> Result<Self> {
        if m == 0 || upper < m {
            return Err(invalid(format!("cluster ({m},{upper}) needs 1 <= m <= M")));
        }
        Ok(Self { m, upper })
    }

    /// Number of targeted eigenvalues.
    pub fn len(&self) -> usize {
        self.upper - self.m + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.m..=self.upper
    }
}

impl std::fmt::Display for ClusterSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.m, self.upper)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub overlap_ratio: f64,
    pub restart_dim: Option<usize>,
    /// use `λ_m` as the shift for every correction equation
    pub shared_shift: bool,
    /// keep local factorizations while the shift moved by at most this much
    pub lazy_refactor: f64,
    pub drop_tol: f64,
    /// consecutive iterations without progress before giving up
    pub stall_limit: usize,
    pub parallelism: Parallelism,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            overlap_ratio: 0.25,
            restart_dim: None,
            shared_shift: false,
            lazy_refactor: 0.0,
            drop_tol: DEFAULT_DROP_TOL,
            stall_limit: 3,
            parallelism: Parallelism::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, cluster: ClusterSpec) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if !(self.overlap_ratio > 0.0 && self.overlap_ratio <= 0.5) {
            return Err(invalid(format!("overlap ratio {} outside (0, 1/2]", self.overlap_ratio)));
        }
        if let Some(r) = self.restart_dim {
            if r < 2 * cluster.upper + 1 {
                return Err(invalid(format!("restart_dim {r} below 2M+1 = {}", 2 * cluster.upper + 1)));
            }
        }
        if !(self.lazy_refactor >= 0.0) {
            return Err(invalid("lazy_refactor must be non-negative"));
        }
        if !(self.drop_tol > 0.0 && self.drop_tol < 1.0) {
            return Err(invalid(format!("drop tolerance {} outside (0, 1)", self.drop_tol)));
        }
        Ok(())
    }
}

/// Trial basis `W`, its images `MW` and `KW`, the projected matrix
/// `S = WᵀKW` and the current Ritz pairs.
#[derive(Debug, Clone)]
pub struct IterationState {
    cluster: ClusterSpec,
    basis: MassBasis,
    stiff_basis: Vec<Vec<f64>>,
    /// lower triangle of `S`, row `i` holds `S[i][0..=i]`
    projected: Vec<Vec<f64>>,
    ritz_values: Vec<f64>,
    coefficients: Mat<f64>,
    ritz_vectors: Vec<Vec<f64>>,
    mass_ritz: Vec<Vec<f64>>,
    stiff_ritz: Vec<Vec<f64>>,
    k: usize,
    parallelism: Parallelism,
}

impl IterationState {
    /// Rayleigh–Ritz in the `M`-orthonormalized span of `vectors`.
    pub fn from_vectors(
        pencil: &SparsePencil,
        vectors: Vec<Vec<f64>>,
        cluster: ClusterSpec,
        drop_tol: f64,
        parallelism: Parallelism,
    ) -> Result<Self> {
        let mut state = Self {
            cluster,
            basis: MassBasis::new(),
            stiff_basis: Vec::new(),
            projected: Vec::new(),
            ritz_values: Vec::new(),
            coefficients: Mat::zeros(0, 0),
            ritz_vectors: Vec::new(),
            mass_ritz: Vec::new(),
            stiff_ritz: Vec::new(),
            k: 0,
            parallelism,
        };
        state.extend(pencil, vectors, drop_tol)?;
        if state.dim() < cluster.upper {
            return Err(invalid(format!(
                "trial basis has {} independent vectors, cluster needs {}",
                state.dim(),
                cluster.upper
            )));
        }
        state.update_ritz(pencil)?;
        Ok(state)
    }

    pub fn cluster(&self) -> ClusterSpec {
        self.cluster
    }

    /// Trial-subspace dimension `n_k`.
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        self.basis.vectors()
    }

    /// All `n_k` Ritz values, ascending.
    pub fn ritz_values(&self) -> &[f64] {
        &self.ritz_values
    }

    /// `λ_m^k..λ_M^k`
    pub fn cluster_values(&self) -> &[f64] {
        &self.ritz_values[self.cluster.m - 1..self.cluster.upper]
    }

    /// Ritz vectors `u_m..u_M`, `M`-orthonormal.
    pub fn cluster_vectors(&self) -> &[Vec<f64>] {
        &self.ritz_vectors
    }

    /// Ritz vector `u_j = W y_j` for a 1-based index `j ≤ n_k`.
    pub fn ritz_vector(&self, j: usize) -> Vec<f64> {
        combine(self.basis.vectors(), self.coefficients.col_as_slice(j - 1))
    }

    /// `max_j ‖S y_j − λ_j y_j‖ / max(λ_j, 1)`
    pub fn projected_residual(&self) -> f64 {
        let s = self.projected_matrix();
        let n = self.dim();
        (0..n)
            .map(|j| {
                let y = self.coefficients.col_as_slice(j);
                let lam = self.ritz_values[j];
                let r: f64 = (0..n)
                    .map(|i| {
                        let sy: f64 = (0..n).map(|l| s[(i, l)] * y[l]).sum();
                        (sy - lam * y[i]).powi(2)
                    })
                    .sum();
                r.sqrt() / lam.abs().max(1.0)
            })
            .fold(0.0, f64::max)
    }

    fn projected_matrix(&self) -> Mat<f64> {
        let n = self.dim();
        Mat::from_fn(n, n, |i, j| if j <= i { self.projected[i][j] } else { self.projected[j][i] })
    }

    /// Appends the accepted candidates to `W`, `MW`, `KW` and grows `S`.
    fn extend(&mut self, pencil: &SparsePencil, candidates: Vec<Vec<f64>>, drop_tol: f64) -> Result<usize> {
        let start = self.dim();
        self.basis.extend(&pencil.mass, candidates, drop_tol);
        let added = self.dim() - start;
        let new: Vec<Vec<f64>> = map_indexed(self.parallelism, added, |a| {
            pencil.stiffness.mul_vec(&self.basis.vectors()[start + a])
        });
        let dots = block_dots(self.basis.vectors(), &new);
        for (a, (kw, row)) in new.into_iter().zip(dots).enumerate() {
            self.projected.push(row[..=start + a].to_vec());
            self.stiff_basis.push(kw);
        }
        Ok(added)
    }

    fn update_ritz(&mut self, _pencil: &SparsePencil) -> Result<()> {
        if self.basis.is_empty() {
            return Err(Error::EmptyBasis);
        }
        let eig = dense_symmetric_eig(&self.projected_matrix())?;
        self.ritz_values = eig.values;
        self.coefficients = eig.vectors;
        let first = self.cluster.m - 1;
        let ys: Vec<&[f64]> = (first..first + self.cluster.len()).map(|j| self.coefficients.col_as_slice(j)).collect();
        self.ritz_vectors = combine_many(self.basis.vectors(), &ys, self.parallelism);
        self.mass_ritz = combine_many(self.basis.mass_vectors(), &ys, self.parallelism);
        self.stiff_ritz = combine_many(&self.stiff_basis, &ys, self.parallelism);
        Ok(())
    }

    /// Residual dual vectors `ρ_i = λ_i M u_i − K u_i` for `i = m..M`, from
    /// the cached images of the basis.
    pub fn residuals(&self) -> Vec<Vec<f64>> {
        self.cluster_values()
            .iter()
            .zip(self.mass_ritz.iter().zip(&self.stiff_ritz))
            .map(|(&lam, (mu, ku))| mu.iter().zip(ku).map(|(a, b)| lam * a - b).collect())
            .collect()
    }

    /// Step 3: appends `new_vectors` to the trial basis and recomputes the
    /// Ritz pairs. Returns how many columns survived orthogonalization.
    pub fn rayleigh_ritz(&mut self, pencil: &SparsePencil, new_vectors: Vec<Vec<f64>>, drop_tol: f64) -> Result<usize> {
        let added = self.extend(pencil, new_vectors, drop_tol)?;
        self.k += 1;
        if added > 0 {
            self.update_ritz(pencil)?;
        }
        Ok(added)
    }
}

/// `Σ_j y_j v_j`
fn combine(vectors: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    combine_many(vectors, &[y], Parallelism::Sequential).pop().unwrap_or_default()
}

const ROW_BLOCK: usize = 2048;

/// `[Σ_j y_j v_j for y in ys]`, streaming each basis vector once per row block.
fn combine_many(vectors: &[Vec<f64>], ys: &[&[f64]], parallelism: Parallelism) -> Vec<Vec<f64>> {
    let n = vectors.first().map_or(0, Vec::len);
    let blocks = n.div_ceil(ROW_BLOCK);
    let parts: Vec<Vec<Vec<f64>>> = map_indexed(parallelism, blocks, |b| {
        let rows = b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n);
        let mut out = vec![vec![0.0; rows.len()]; ys.len()];
        for (j, v) in vectors.iter().enumerate() {
            let chunk = &v[rows.clone()];
            for (o, y) in out.iter_mut().zip(ys) {
                axpy(y[j], chunk, o);
            }
        }
        out
    });
    let mut out = vec![Vec::with_capacity(n); ys.len()];
    for part in parts {
        for (o, p) in out.iter_mut().zip(part) {
            o.extend_from_slice(&p);
        }
    }
    out
}

/// Step 1: dense solve on the initial mesh, prolongation of the first `M`
/// eigenvectors and one Rayleigh–Ritz on the fine mesh.
pub fn initialize(
    hier: &MeshHierarchy,
    pencil: &SparsePencil,
    cluster: ClusterSpec,
    drop_tol: f64,
    parallelism: Parallelism,
) -> Result<IterationState> {
    let n_initial = hier.initial.n_dofs();
    if cluster.upper > n_initial {
        return Err(Error::ClusterTooLarge { upper: cluster.upper, dofs: n_initial });
    }
    if pencil.n() != hier.fine.n_dofs() {
        return Err(invalid("pencil does not live on the fine mesh of the hierarchy"));
    }
    let initial = assemble(&hier.initial);
    let eig = dense_generalized_eig(&initial.stiffness.to_dense(), &initial.mass.to_dense())?;
    debug!("initial mesh: {n_initial} dofs, lambda_1 = {}", eig.values[0]);
    let vectors: Vec<Vec<f64>> =
        map_indexed(parallelism, cluster.upper, |j| hier.prolong_initial.mul_vec(eig.vector(j)));
    IterationState::from_vectors(pencil, vectors, cluster, drop_tol, parallelism)
}

/// `ρ = λMu − Ku`
pub fn residual_dual(pencil: &SparsePencil, lambda: f64, u: &[f64]) -> Vec<f64> {
    let mu = pencil.mass.mul_vec(u);
    let ku = pencil.stiffness.mul_vec(u);
    mu.iter().zip(&ku).map(|(a, b)| lambda * a - b).collect()
}

/// Step 2: `t_i = s_i − U_J (U_Jᵀ M s_i)` with `s_i` the preconditioned
/// residual of the `i`-th targeted pair. Position `i` of the preconditioner
/// must carry the shift of `λ_{m+i}`.
pub fn correction_step(state: &IterationState, prec: &SchwarzPreconditioner) -> Result<Vec<Vec<f64>>> {
    let residuals = state.residuals();
    correction_step_with(state, prec, &residuals)
}

/// [`correction_step`] for explicitly given residual dual vectors.
pub fn correction_step_with(state: &IterationState, prec: &SchwarzPreconditioner, residuals: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if prec.len() != residuals.len() {
        return Err(invalid(format!("preconditioner holds {} shifts, cluster has {}", prec.len(), residuals.len())));
    }
    let out: Vec<Result<Vec<f64>>> = map_indexed(state.parallelism, residuals.len(), |i| {
        let mut t = prec.apply(&residuals[i], i)?;
        project_out(&mut t, &state.ritz_vectors, &state.mass_ritz);
        Ok(t)
    });
    out.into_iter().collect()
}

/// Applies `I − U Uᵀ M` given `U` and `MU`, twice for stability.
fn project_out(t: &mut [f64], u: &[Vec<f64>], mu: &[Vec<f64>]) {
    for _ in 0..2 {
        let c: Vec<f64> = mu.iter().map(|m| dot(m, t)).collect();
        for (v, &cj) in u.iter().zip(&c) {
            axpy(-cj, v, t);
        }
    }
}

/// `√(Σ_i ρ_iᵀ M⁻¹ ρ_i)` for the given residual dual vectors.
pub fn stop_norm_of(residuals: &[Vec<f64>], mass: &Factorization, parallelism: Parallelism) -> f64 {
    let parts: Vec<f64> = map_indexed(parallelism, residuals.len(), |i| dot(&residuals[i], &mass.solve(&residuals[i])));
    parts.iter().map(|p| p.max(0.0)).sum::<f64>().sqrt()
}

/// Stop norm for explicit pairs `(λ_i, u_i)`.
pub fn stop_norm(pencil: &SparsePencil, pairs: &[(f64, &[f64])], mass: &Factorization) -> f64 {
    let residuals: Vec<Vec<f64>> = pairs.iter().map(|&(l, u)| residual_dual(pencil, l, u)).collect();
    stop_norm_of(&residuals, mass, Parallelism::Sequential)
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    /// `λ_m^k..λ_M^k`
    pub values: Vec<f64>,
    /// `λ_1^k..λ_{m−1}^k`
    pub lower_values: Vec<f64>,
    pub stop_norm: f64,
    /// `Σ_i |λ_i^k − λ_i^{k−1}|`
    pub value_change: f64,
    pub basis_dim: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PhaseTimings {
    pub initialize: f64,
    pub coarse: f64,
    pub preconditioner: f64,
    pub correction: f64,
    pub rayleigh_ritz: f64,
    pub stop_norm: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverReport {
    pub cluster: ClusterSpec,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub vectors: Vec<Vec<f64>>,
    pub initial_values: Vec<f64>,
    pub iterations: usize,
    pub stop_norm: f64,
    pub converged: bool,
    pub stagnated: bool,
    pub trace: Vec<TraceRecord>,
    /// seconds
    pub timings: PhaseTimings,
    pub subdomains: usize,
    pub local_factorizations: usize,
    pub indefinite_locals: usize,
    pub shift_diagnostics: Vec<ShiftDiagnostics>,
}

impl SolverReport {
    pub fn basis_history(&self) -> Vec<usize> {
        self.trace.iter().map(|r| r.basis_dim).collect()
    }

    /// `λ_i^k` for `i = m..M`, one row per iteration including `k = 0`.
    pub fn value_history(&self) -> Vec<Vec<f64>> {
        self.trace.iter().map(|r| r.values.clone()).collect()
    }
}

fn shifts_for(state: &IterationState, bound: Option<f64>, shared: bool) -> Vec<f64> {
    let vals = state.cluster_values();
    let clamp = |s: f64| match bound {
        Some(b) => s.min(b - 1e-8 * b.abs()),
        None => s,
    };
    if shared {
        vec![clamp(vals[0]); vals.len()]
    } else {
        vals.iter().map(|&s| clamp(s)).collect()
    }
}

/// Runs the full iteration until the stop norm falls below `config.tol`,
/// `config.max_iter` is reached, or the basis stops growing.
pub fn solve(
    hier: &MeshHierarchy,
    pencil: &SparsePencil,
    decomp: &Decomposition,
    cluster: ClusterSpec,
    config: &SolverConfig,
) -> Result<SolverReport> {
    config.validate(cluster)?;
    let par = config.parallelism;
    let clock = Instant::now();
    let mut timings = PhaseTimings::default();
    let elapsed_ms = || clock.elapsed().as_secs_f64() * 1e3;

    let t = Instant::now();
    let mut state = initialize(hier, pencil, cluster, config.drop_tol, par)?;
    let initial_values = state.cluster_values().to_vec();
    timings.initialize = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let coarse = Arc::new(CoarsePiece::build(hier, cluster.upper)?);
    let locals = Arc::new(local_pieces(pencil, decomp));
    let mass = factorize(&pencil.mass, true)?;
    timings.coarse = t.elapsed().as_secs_f64();
    let bound = coarse.first_deflated_value();
    if bound.is_none() {
        warn!("coarse space has no eigenvalue above index {}: coarse term is empty", cluster.upper);
    }

    let t = Instant::now();
    let mut residuals = state.residuals();
    let mut stop = stop_norm_of(&residuals, &mass, par);
    timings.stop_norm += t.elapsed().as_secs_f64();

    let record = |state: &IterationState, stop: f64, change: f64, wall: f64| TraceRecord {
        k: state.iteration(),
        values: state.cluster_values().to_vec(),
        lower_values: state.ritz_values()[..cluster.m - 1].to_vec(),
        stop_norm: stop,
        value_change: change,
        basis_dim: state.dim(),
        wall_ms: wall,
    };
    let mut trace = vec![record(&state, stop, f64::NAN, elapsed_ms())];
    info!("k=0 stop={stop:.3e} dim={}", state.dim());

    let mut prec: Option<SchwarzPreconditioner> = None;
    let mut converged = stop < config.tol;
    let mut stagnated = false;
    let mut stalls = 0;
    let mut indefinite = 0;
    let mut last_diag = Vec::new();
    let mut restart_block: Vec<Vec<f64>>;

    while !converged && state.iteration() < config.max_iter {
        let t = Instant::now();
        let shifts = shifts_for(&state, bound, config.shared_shift);
        match prec.as_mut() {
            Some(p) => p.refresh(&shifts, config.lazy_refactor)?,
            None => {
                prec = Some(SchwarzPreconditioner::with_locals(coarse.clone(), locals.clone(), &shifts, par)?)
            }
        }
        let p = prec.as_ref().unwrap();
        last_diag = p.diagnostics();
        indefinite = indefinite.max(last_diag.iter().map(|d| d.indefinite_locals).max().unwrap_or(0));
        timings.preconditioner += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let corrections = correction_step_with(&state, p, &residuals)?;
        timings.correction += t.elapsed().as_secs_f64();

        let t = Instant::now();
        let before = state.cluster_values().to_vec();
        restart_block = if config.restart_dim.is_some() { corrections.clone() } else { Vec::new() };
        let added = state.rayleigh_ritz(pencil, corrections, config.drop_tol)?;
        if let Some(limit) = config.restart_dim {
            if state.dim() > limit {
                let k = state.iteration();
                let mut keep: Vec<Vec<f64>> = (1..=cluster.upper).map(|j| state.ritz_vector(j)).collect();
                keep.extend(restart_block.drain(..));
                state = IterationState::from_vectors(pencil, keep, cluster, config.drop_tol, par)?;
                state.k = k;
                debug!("restart at k={k}: basis dim {}", state.dim());
            }
        }
        timings.rayleigh_ritz += t.elapsed().as_secs_f64();

        let t = Instant::now();
        residuals = state.residuals();
        let previous = stop;
        stop = stop_norm_of(&residuals, &mass, par);
        timings.stop_norm += t.elapsed().as_secs_f64();

        let change: f64 = state.cluster_values().iter().zip(&before).map(|(a, b)| (a - b).abs()).sum();
        trace.push(record(&state, stop, change, elapsed_ms()));
        info!("k={} stop={stop:.3e} dim={} added={added}", state.iteration(), state.dim());

        converged = stop < config.tol;
        if added == 0 || stop >= previous {
            stalls += 1;
        } else {
            stalls = 0;
        }
        if !converged && stalls >= config.stall_limit {
            warn!("no progress for {stalls} iterations, stopping at k={}", state.iteration());
            stagnated = true;
            break;
        }
    }
    if !converged && !stagnated {
        warn!("max_iter {} reached with stop norm {stop:.3e}", config.max_iter);
    }
    timings.total = clock.elapsed().as_secs_f64();

    Ok(SolverReport {
        cluster,
        values: state.cluster_values().to_vec(),
        vectors: state.cluster_vectors().to_vec(),
        initial_values,
        iterations: state.iteration(),
        stop_norm: stop,
        converged,
        stagnated,
        trace,
        timings,
        subdomains: decomp.len(),
        local_factorizations: prec.as_ref().map_or(0, SchwarzPreconditioner::factorization_count),
        indefinite_locals: indefinite,
        shift_diagnostics: last_diag,
    })
}
