//! Two-level additive Schwarz preconditioner for shifted correction
//! equations.
//!
//! For a shift `λ` and a residual dual vector `ρ` the preconditioner returns
//!
//! ```text
//! t = P_H Σ_{j>M} (u_jᵀ P_Hᵀ ρ) / (λ_j^H − λ) · u_j  +  Σ_l E_lᵀ (K_l − λ M_l)⁻¹ E_l ρ
//! ```
//!
//! The coarse term inverts `A^H − λ` only on the span of the coarse
//! eigenvectors above the cluster and vanishes on the lower ones. The local
//! terms are exact solves on the overlapping subdomains. Working with dual
//! vectors lets the mass-projection solves of the operator form cancel.

use std::sync::Arc;

use log::{debug, info};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fem::{assemble, SparsePencil};
use crate::linalg::{dense_generalized_eig, factorize_symmetric, EigenBasis, FactorKind, Factorization};
use crate::mesh::{Decomposition, MeshHierarchy};
use crate::parallel::{map_indexed, Parallelism};
use crate::sparse::{axpy, dot, CsrMatrix};

/// Coarse interpolation plus the complete coarse eigendecomposition.
#[derive(Debug, Clone)]
pub struct CoarsePiece {
    prolongation: CsrMatrix,
    restriction: CsrMatrix,
    eigen: EigenBasis,
    cluster_cut: usize,
}

impl CoarsePiece {
    /// Assembles the coarse pencil of `hier` and solves it densely.
    pub fn build(hier: &MeshHierarchy, cluster_cut: usize) -> Result<Self> {
        let coarse = assemble(&hier.coarse);
        Self::from_parts(hier.prolong_coarse.clone(), &coarse, cluster_cut)
    }

    pub fn from_parts(prolongation: CsrMatrix, coarse: &SparsePencil, cluster_cut: usize) -> Result<Self> {
        if prolongation.ncols() != coarse.n() {
            return Err(invalid("prolongation width does not match the coarse pencil"));
        }
        let eigen = dense_generalized_eig(&coarse.stiffness.to_dense(), &coarse.mass.to_dense())?;
        let restriction = prolongation.transpose();
        Ok(Self { prolongation, restriction, eigen, cluster_cut })
    }

    pub fn n_coarse(&self) -> usize {
        self.eigen.len()
    }

    pub fn n_fine(&self) -> usize {
        self.prolongation.nrows()
    }

    pub fn cluster_cut(&self) -> usize {
        self.cluster_cut
    }

    pub fn eigen(&self) -> &EigenBasis {
        &self.eigen
    }

    pub fn prolongation(&self) -> &CsrMatrix {
        &self.prolongation
    }

    /// `λ_{M+1}^H`, or `None` when the deflated coarse space is empty.
    pub fn first_deflated_value(&self) -> Option<f64> {
        self.eigen.values.get(self.cluster_cut).copied()
    }

    /// `λ_{N_H}^H`
    pub fn largest_value(&self) -> Option<f64> {
        self.eigen.values.last().copied()
    }

    /// Coarse contribution `P_H x_H` for shift `shift`.
    pub fn apply(&self, rho: &[f64], shift: f64) -> Vec<f64> {
        let y = self.restriction.mul_vec(rho);
        let mut x = vec![0.0; self.n_coarse()];
        for j in self.cluster_cut..self.n_coarse() {
            let u = self.eigen.vector(j);
            let c = dot(u, &y) / (self.eigen.values[j] - shift);
            axpy(c, u, &mut x);
        }
        self.prolongation.mul_vec(&x)
    }
}

/// One overlapping subdomain: its dof set and the principal sub-pencil.
#[derive(Debug, Clone)]
pub struct LocalPiece {
    pub indices: Vec<usize>,
    pub pencil: SparsePencil,
}

impl LocalPiece {
    fn factor(&self, shift: f64) -> Result<Factorization> {
        factorize_symmetric(&self.pencil.shifted(shift))
    }
}

#[derive(Debug)]
struct ShiftSlot {
    shift: f64,
    factors: Vec<Factorization>,
    indefinite: usize,
}

/// Per-shift runtime bounds of the preconditioner pieces.
#[derive(Debug, Clone, Serialize)]
pub struct ShiftDiagnostics {
    pub shift: f64,
    /// `λ_min` of the deflated coarse operator, `λ_{M+1}^H − λ`
    pub coarse_min: Option<f64>,
    /// `λ_max` of the deflated coarse operator, `λ_{N_H}^H − λ`
    pub coarse_max: Option<f64>,
    /// local factorizations that needed the symmetric-indefinite path
    pub indefinite_locals: usize,
}

#[derive(Debug)]
pub struct SchwarzPreconditioner {
    coarse: Arc<CoarsePiece>,
    locals: Arc<Vec<LocalPiece>>,
    slots: Vec<ShiftSlot>,
    slot_of: Vec<usize>,
    parallelism: Parallelism,
    factorizations: usize,
}

/// Extracts the local sub-pencils of a decomposition.
pub fn local_pieces(pencil: &SparsePencil, decomp: &Decomposition) -> Vec<LocalPiece> {
    decomp
        .subdomains
        .iter()
        .map(|set| LocalPiece { indices: set.clone(), pencil: pencil.principal_subpencil(set) })
        .collect()
}

/// Builds every local factorization for every shift.
pub fn prepare(
    pencil: &SparsePencil,
    decomp: &Decomposition,
    coarse: Arc<CoarsePiece>,
    shifts: &[f64],
    parallelism: Parallelism,
) -> Result<SchwarzPreconditioner> {
    if decomp.n_dofs != pencil.n() || coarse.n_fine() != pencil.n() {
        return Err(invalid("decomposition, coarse piece and pencil disagree on the fine dof count"));
    }
    let locals = Arc::new(local_pieces(pencil, decomp));
    SchwarzPreconditioner::with_locals(coarse, locals, shifts, parallelism)
}

impl SchwarzPreconditioner {
    pub fn with_locals(
        coarse: Arc<CoarsePiece>,
        locals: Arc<Vec<LocalPiece>>,
        shifts: &[f64],
        parallelism: Parallelism,
    ) -> Result<Self> {
        let mut p = Self { coarse, locals, slots: Vec::new(), slot_of: Vec::new(), parallelism, factorizations: 0 };
        p.refresh(shifts, 0.0)?;
        Ok(p)
    }

    fn check_shift(&self, shift: f64) -> Result<()> {
        if !shift.is_finite() {
            return Err(invalid(format!("shift {shift} is not finite")));
        }
        if let Some(bound) = self.coarse.first_deflated_value() {
            if shift >= bound {
                return Err(Error::ShiftOutOfRange { shift, bound });
            }
        }
        Ok(())
    }

    fn build_slot(&self, shift: f64) -> Result<ShiftSlot> {
        let factors: Vec<Result<Factorization>> =
            map_indexed(self.parallelism, self.locals.len(), |l| self.locals[l].factor(shift));
        let factors = factors.into_iter().collect::<Result<Vec<_>>>()?;
        let indefinite = factors.iter().filter(|f| f.kind() == FactorKind::SymmetricIndefinite).count();
        if indefinite > 0 {
            info!("shift {shift}: {indefinite} of {} local matrices indefinite", factors.len());
        }
        Ok(ShiftSlot { shift, factors, indefinite })
    }

    /// Moves the preconditioner to new shifts. A slot whose shift is within
    /// `reuse_tol` of a requested shift is kept; identical shifts share one
    /// set of factorizations.
    pub fn refresh(&mut self, shifts: &[f64], reuse_tol: f64) -> Result<()> {
        for &s in shifts {
            self.check_shift(s)?;
        }
        let mut old: Vec<Option<ShiftSlot>> = std::mem::take(&mut self.slots).into_iter().map(Some).collect();
        let mut slots: Vec<ShiftSlot> = Vec::new();
        let mut slot_of = Vec::with_capacity(shifts.len());
        for &s in shifts {
            if let Some(pos) = slots.iter().position(|slot| slot.shift == s) {
                slot_of.push(pos);
                continue;
            }
            let reuse = old
                .iter()
                .position(|o| o.as_ref().is_some_and(|slot| (slot.shift - s).abs() <= reuse_tol));
            if let Some(pos) = reuse {
                let slot = old[pos].take().unwrap();
                if let Some(existing) = slots.iter().position(|x| x.shift == slot.shift) {
                    slot_of.push(existing);
                    continue;
                }
                debug!("reusing factorizations of shift {} for {s}", slot.shift);
                slot_of.push(slots.len());
                slots.push(slot);
                continue;
            }
            let slot = self.build_slot(s)?;
            self.factorizations += slot.factors.len();
            slot_of.push(slots.len());
            slots.push(slot);
        }
        self.slots = slots;
        self.slot_of = slot_of;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slot_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slot_of.is_empty()
    }

    pub fn n_subdomains(&self) -> usize {
        self.locals.len()
    }

    pub fn coarse(&self) -> &CoarsePiece {
        &self.coarse
    }

    /// Shift actually used for position `i`.
    pub fn shift(&self, i: usize) -> f64 {
        self.slots[self.slot_of[i]].shift
    }

    /// Local factorizations built since construction.
    pub fn factorization_count(&self) -> usize {
        self.factorizations
    }

    pub fn local_kinds(&self, i: usize) -> Vec<FactorKind> {
        self.slots[self.slot_of[i]].factors.iter().map(Factorization::kind).collect()
    }

    pub fn diagnostics(&self) -> Vec<ShiftDiagnostics> {
        self.slot_of
            .iter()
            .map(|&s| {
                let slot = &self.slots[s];
                ShiftDiagnostics {
                    shift: slot.shift,
                    coarse_min: self.coarse.first_deflated_value().map(|v| v - slot.shift),
                    coarse_max: self.coarse.largest_value().map(|v| v - slot.shift),
                    indefinite_locals: slot.indefinite,
                }
            })
            .collect()
    }

    /// Local part `Σ_l E_lᵀ (K_l − λM_l)⁻¹ E_l ρ` for position `i`.
    pub fn apply_local(&self, rho: &[f64], i: usize) -> Result<Vec<f64>> {
        let slot = self.slot(i)?;
        let pieces: Vec<Vec<f64>> = map_indexed(self.parallelism, self.locals.len(), |l| {
            let idx = &self.locals[l].indices;
            let mut x: Vec<f64> = idx.iter().map(|&g| rho[g]).collect();
            slot.factors[l].solve_in_place(&mut x);
            x
        });
        let mut t = vec![0.0; rho.len()];
        for (piece, local) in pieces.iter().zip(self.locals.iter()) {
            for (&g, &v) in local.indices.iter().zip(piece) {
                t[g] += v;
            }
        }
        Ok(t)
    }

    /// Coarse part for position `i`.
    pub fn apply_coarse(&self, rho: &[f64], i: usize) -> Result<Vec<f64>> {
        let slot = self.slot(i)?;
        Ok(self.coarse.apply(rho, slot.shift))
    }

    /// Maps the dual vector `rho` to the primal correction for position `i`.
    pub fn apply(&self, rho: &[f64], i: usize) -> Result<Vec<f64>> {
        if rho.len() != self.coarse.n_fine() {
            return Err(invalid(format!("dual vector length {} != {}", rho.len(), self.coarse.n_fine())));
        }
        let mut t = self.apply_coarse(rho, i)?;
        let local = self.apply_local(rho, i)?;
        for (a, b) in t.iter_mut().zip(&local) {
            *a += b;
        }
        Ok(t)
    }

    fn slot(&self, i: usize) -> Result<&ShiftSlot> {
        self.slot_of
            .get(i)
            .map(|&s| &self.slots[s])
            .ok_or_else(|| invalid(format!("no prepared shift at position {i}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_decomposition, build_hierarchy, DomainShape};

    fn setup() -> (MeshHierarchy, SparsePencil, Decomposition) {
        let hier = build_hierarchy(DomainShape::Square, 2, 4).unwrap();
        let pencil = assemble(&hier.fine);
        let decomp = build_decomposition(&hier, 0.25).unwrap();
        (hier, pencil, decomp)
    }

    #[test]
    fn zero_in_zero_out_and_unprepared_index() {
        let (hier, pencil, decomp) = setup();
        let coarse = Arc::new(CoarsePiece::build(&hier, 2).unwrap());
        let p = prepare(&pencil, &decomp, coarse, &[0.0], Parallelism::Sequential).unwrap();
        let t = p.apply(&vec![0.0; pencil.n()], 0).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
        assert!(p.apply(&vec![0.0; pencil.n()], 1).is_err());
    }

    #[test]
    fn zero_shift_locals_are_spd() {
        let (hier, pencil, decomp) = setup();
        let coarse = Arc::new(CoarsePiece::build(&hier, 2).unwrap());
        let p = prepare(&pencil, &decomp, coarse, &[0.0], Parallelism::Sequential).unwrap();
        assert!(p.local_kinds(0).iter().all(|&k| k == FactorKind::SpdCholesky));
        assert_eq!(p.factorization_count(), decomp.len());
    }

    #[test]
    fn shift_out_of_range_rejected() {
        let (hier, pencil, decomp) = setup();
        let coarse = Arc::new(CoarsePiece::build(&hier, 2).unwrap());
        let bound = coarse.first_deflated_value().unwrap();
        let err = prepare(&pencil, &decomp, coarse, &[bound], Parallelism::Sequential).unwrap_err();
        assert!(matches!(err, Error::ShiftOutOfRange { .. }));
    }

    #[test]
    fn identical_shifts_share_factorizations() {
        let (hier, pencil, decomp) = setup();
        let coarse = Arc::new(CoarsePiece::build(&hier, 2).unwrap());
        let p = prepare(&pencil, &decomp, coarse, &[1.0, 1.0, 2.0], Parallelism::Sequential).unwrap();
        assert_eq!(p.factorization_count(), 2 * decomp.len());
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn lazy_refresh_reuses_close_shifts() {
        let (hier, pencil, decomp) = setup();
        let coarse = Arc::new(CoarsePiece::build(&hier, 2).unwrap());
        let mut p = prepare(&pencil, &decomp, coarse, &[1.0, 2.0], Parallelism::Sequential).unwrap();
        p.refresh(&[1.001, 2.5], 0.01).unwrap();
        assert_eq!(p.factorization_count(), 3 * decomp.len());
        assert_eq!(p.shift(0), 1.0);
        assert_eq!(p.shift(1), 2.5);
        p.refresh(&[1.001, 2.5], 0.0).unwrap();
        assert_eq!(p.factorization_count(), 4 * decomp.len());
    }

    #[test]
    fn coarse_term_annihilates_cluster_directions() {
        let (hier, pencil, decomp) = setup();
        let cut = 3;
        let coarse = Arc::new(CoarsePiece::build(&hier, cut).unwrap());
        let p = prepare(&pencil, &decomp, coarse.clone(), &[0.5], Parallelism::Sequential).unwrap();
        for j in 0..cut {
            let fine = coarse.prolongation().mul_vec(coarse.eigen().vector(j));
            let rho = pencil.mass.mul_vec(&fine);
            let t = p.apply_coarse(&rho, 0).unwrap();
            let scale = rho.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(t.iter().all(|v| v.abs() <= 1e-10 * scale.max(1.0)), "direction {j}");
        }
    }

    #[test]
    fn diagnostics_report_coarse_gap() {
        let (hier, pencil, decomp) = setup();
        let coarse = Arc::new(CoarsePiece::build(&hier, 2).unwrap());
        let lam3 = coarse.eigen().values[2];
        let p = prepare(&pencil, &decomp, coarse, &[3.0], Parallelism::Sequential).unwrap();
        let d = &p.diagnostics()[0];
        assert!((d.coarse_min.unwrap() - (lam3 - 3.0)).abs() <= 1e-10 * lam3);
    }
}
