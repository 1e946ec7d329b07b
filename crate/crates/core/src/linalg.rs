//! Numerical kernels: symmetric sparse factorizations, the dense symmetric
//! generalized eigensolver, and Gram–Schmidt in the mass inner product.

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use log::debug;

use crate::error::{invalid, Error, Result};
use crate::sparse::{axpy, dot, CsrMatrix};

/// Largest order for which the symmetric-indefinite path uses a dense
/// Bunch–Kaufman factorization; larger systems use unpivoted envelope LDLᵀ
/// with iterative refinement.
pub const DENSE_INDEFINITE_LIMIT: usize = 2500;

/// Default relative drop tolerance for [`b_orthonormalize`].
pub const DEFAULT_DROP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum FactorKind {
    SpdCholesky,
    SymmetricIndefinite,
}

/// Envelope (skyline) LDLᵀ. Row `i` stores `L[i, first[i]..i]`.
#[derive(Debug, Clone)]
struct Envelope {
    first: Vec<usize>,
    ptr: Vec<usize>,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

impl Envelope {
    fn factor(s: &CsrMatrix, require_positive: bool) -> Result<Self> {
        let n = s.nrows();
        let mut first = Vec::with_capacity(n);
        let mut ptr = Vec::with_capacity(n + 1);
        ptr.push(0);
        for i in 0..n {
            let f = s.row(i).0.first().copied().unwrap_or(i).min(i);
            first.push(f);
            ptr.push(ptr[i] + (i - f));
        }
        let mut lower = vec![0.0; ptr[n]];
        let mut diag = vec![0.0; n];
        let scale = (0..n).map(|i| s.get(i, i).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let tiny = 1e-14 * scale;
        let mut u = Vec::new();
        for i in 0..n {
            let fi = first[i];
            let (done, rest) = lower.split_at_mut(ptr[i]);
            let row = &mut rest[..i - fi];
            let mut aii = 0.0;
            let (cols, vals) = s.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if c < i {
                    row[c - fi] = v;
                } else if c == i {
                    aii = v;
                }
            }
            // row holds a_ik; turn it into u_ik = l_ik d_k in place
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let lj = &done[ptr[j] + (k0 - fj)..ptr[j] + (j - fj)];
                let ui = &row[k0 - fi..j - fi];
                let acc = dot(ui, lj);
                row[j - fi] -= acc;
            }
            u.clear();
            u.extend_from_slice(row);
            let mut d = aii;
            for (k, (lik, &uik)) in row.iter_mut().zip(&u).enumerate() {
                *lik = uik / diag[fi + k];
                d -= uik * *lik;
            }
            if d.abs() <= tiny || !d.is_finite() {
                return Err(Error::Singular { pivot: i });
            }
            if require_positive && d < 0.0 {
                return Err(Error::Indefinite { pivot: i, value: d });
            }
            diag[i] = d;
        }
        Ok(Self { first, ptr, lower, diag })
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.diag.len();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.lower[self.ptr[i]..self.ptr[i + 1]];
            x[i] -= dot(row, &x[fi..i]);
        }
        for (xi, d) in x.iter_mut().zip(&self.diag) {
            *xi /= d;
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.lower[self.ptr[i]..self.ptr[i + 1]];
            let xi = x[i];
            axpy(-xi, row, &mut x[fi..i]);
        }
    }

    fn negative_pivots(&self) -> usize {
        self.diag.iter().filter(|&&d| d < 0.0).count()
    }
}

#[derive(Debug)]
enum Backend {
    Envelope(Envelope),
    /// unpivoted envelope LDLᵀ of an indefinite matrix; keeps the matrix for
    /// one step of iterative refinement
    RefinedEnvelope(Envelope, CsrMatrix),
    Dense(faer::linalg::solvers::Lblt<f64>),
}

/// A factorization of a symmetric sparse matrix, immutable after
/// construction and safe to share across threads.
#[derive(Debug)]
pub struct Factorization {
    kind: FactorKind,
    n: usize,
    backend: Backend,
}

/// Factors `s`. With `expect_spd` a non-positive pivot yields
/// [`Error::Indefinite`]; otherwise the symmetric-indefinite path is used.
pub fn factorize(s: &CsrMatrix, expect_spd: bool) -> Result<Factorization> {
    if s.nrows() != s.ncols() {
        return Err(invalid("factorize needs a square matrix"));
    }
    let n = s.nrows();
    if expect_spd {
        let env = Envelope::factor(s, true)?;
        return Ok(Factorization { kind: FactorKind::SpdCholesky, n, backend: Backend::Envelope(env) });
    }
    if n <= DENSE_INDEFINITE_LIMIT {
        let dense = s.to_dense();
        let lblt = dense.lblt(Side::Lower);
        check_block_pivots(&lblt, s.max_abs(), n)?;
        return Ok(Factorization { kind: FactorKind::SymmetricIndefinite, n, backend: Backend::Dense(lblt) });
    }
    let env = Envelope::factor(s, false)?;
    Ok(Factorization {
        kind: FactorKind::SymmetricIndefinite,
        n,
        backend: Backend::RefinedEnvelope(env, s.clone()),
    })
}

/// SPD attempt first, then the symmetric-indefinite fallback.
pub fn factorize_symmetric(s: &CsrMatrix) -> Result<Factorization> {
    match factorize(s, true) {
        Ok(f) => Ok(f),
        Err(Error::Indefinite { pivot, value }) => {
            debug!("pivot {pivot} = {value:e} not positive, refactorizing as symmetric indefinite");
            factorize(s, false)
        }
        Err(Error::Singular { pivot }) => {
            debug!("pivot {pivot} vanished without pivoting, refactorizing as symmetric indefinite");
            factorize(s, false)
        }
        Err(e) => Err(e),
    }
}

fn check_block_pivots(lblt: &faer::linalg::solvers::Lblt<f64>, scale: f64, n: usize) -> Result<()> {
    let d = lblt.B_diag().column_vector();
    let e = lblt.B_subdiag().column_vector();
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE) * (n as f64).max(1.0);
    let mut i = 0;
    while i < n {
        let small = if i + 1 < n && e[i] != 0.0 {
            let (a, b, c) = (d[i], e[i], d[i + 1]);
            let mean = 0.5 * (a + c);
            let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let m = (mean - rad).abs().min((mean + rad).abs());
            i += 2;
            m
        } else {
            i += 1;
            d[i - 1].abs()
        };
        if !(small > tol) {
            return Err(Error::Singular { pivot: i - 1 });
        }
    }
    Ok(())
}

impl Factorization {
    pub fn kind(&self) -> FactorKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = rhs.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n, "rhs length mismatch");
        match &self.backend {
            Backend::Envelope(env) => env.solve_in_place(x),
            Backend::RefinedEnvelope(env, s) => {
                let rhs = x.to_vec();
                env.solve_in_place(x);
                let mut r = s.mul_vec(x);
                for (ri, bi) in r.iter_mut().zip(&rhs) {
                    *ri = bi - *ri;
                }
                env.solve_in_place(&mut r);
                for (xi, ri) in x.iter_mut().zip(&r) {
                    *xi += ri;
                }
            }
            Backend::Dense(lblt) => {
                let b = Mat::<f64>::from_fn(self.n, 1, |i, _| x[i]);
                let sol = lblt.solve(&b);
                x.copy_from_slice(sol.col_as_slice(0));
            }
        }
    }

    /// Number of negative eigenvalues, when the backend exposes the inertia.
    pub fn negative_eigenvalues(&self) -> Option<usize> {
        match &self.backend {
            Backend::Envelope(env) | Backend::RefinedEnvelope(env, _) => Some(env.negative_pivots()),
            Backend::Dense(lblt) => {
                let d = lblt.B_diag().column_vector();
                let e = lblt.B_subdiag().column_vector();
                let mut count = 0;
                let mut i = 0;
                while i < self.n {
                    if i + 1 < self.n && e[i] != 0.0 {
                        // a 2×2 Bunch–Kaufman block always has one eigenvalue of each sign
                        let det = d[i] * d[i + 1] - e[i] * e[i];
                        count += if det < 0.0 { 1 } else if d[i] < 0.0 { 2 } else { 0 };
                        i += 2;
                    } else {
                        count += usize::from(d[i] < 0.0);
                        i += 1;
                    }
                }
                Some(count)
            }
        }
    }
}

/// Ascending eigenvalues with `B`-orthonormal eigenvectors in the columns.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    pub values: Vec<f64>,
    pub vectors: Mat<f64>,
}

impl EigenBasis {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        self.vectors.col_as_slice(j)
    }
}

/// Full spectrum of the symmetric-definite pencil `(A, B)`, reduced to a
/// standard problem through the Cholesky factor of `B`.
pub fn dense_generalized_eig(a: &Mat<f64>, b: &Mat<f64>) -> Result<EigenBasis> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(invalid("dense_generalized_eig: dimension mismatch"));
    }
    let llt = b.llt(Side::Lower).map_err(|_| invalid("B is not symmetric positive definite"))?;
    let l = llt.L();
    let mut x = a.to_owned();
    l.solve_lower_triangular_in_place(x.as_mut());
    let mut c = x.transpose().to_owned();
    l.solve_lower_triangular_in_place(c.as_mut());
    for j in 0..n {
        for i in 0..j {
            let s = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = s;
            c[(j, i)] = s;
        }
    }
    let eig = c.self_adjoint_eigen(Side::Lower).map_err(|e| Error::EigenFailure(format!("{e:?}")))?;
    let values: Vec<f64> = (0..n).map(|i| eig.S()[i]).collect();
    let mut vectors = eig.U().to_owned();
    l.transpose().solve_upper_triangular_in_place(vectors.as_mut());
    Ok(EigenBasis { values, vectors })
}

/// Full spectrum of a dense symmetric matrix (`B = I`).
pub fn dense_symmetric_eig(a: &Mat<f64>) -> Result<EigenBasis> {
    let eig = a.self_adjoint_eigen(Side::Lower).map_err(|e| Error::EigenFailure(format!("{e:?}")))?;
    let values = (0..a.nrows()).map(|i| eig.S()[i]).collect();
    Ok(EigenBasis { values, vectors: eig.U().to_owned() })
}

/// An `M`-orthonormal set of vectors together with their images under `M`.
#[derive(Debug, Clone, Default)]
pub struct MassBasis {
    vectors: Vec<Vec<f64>>,
    mass_vectors: Vec<Vec<f64>>,
}

impl MassBasis {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn mass_vectors(&self) -> &[Vec<f64>] {
        &self.mass_vectors
    }

    pub fn into_vectors(self) -> Vec<Vec<f64>> {
        self.vectors
    }

    /// Two passes of block Gram–Schmidt against the current basis followed
    /// by modified Gram–Schmidt (also repeated) inside the new block. A
    /// candidate whose projected `M`-norm falls below `drop_tol` times its
    /// original norm is discarded. Returns the indices of accepted candidates.
    pub fn extend(&mut self, mass: &CsrMatrix, candidates: Vec<Vec<f64>>, drop_tol: f64) -> Vec<usize> {
        let mut block: Vec<(usize, Vec<f64>, f64)> = Vec::with_capacity(candidates.len());
        for (idx, v) in candidates.into_iter().enumerate() {
            let pre = dot(&v, &mass.mul_vec(&v)).max(0.0).sqrt();
            if pre > 0.0 && pre.is_finite() {
                block.push((idx, v, pre));
            }
        }
        let old = self.vectors.len();
        for _pass in 0..2 {
            let mut ts: Vec<Vec<f64>> = block.iter_mut().map(|b| std::mem::take(&mut b.1)).collect();
            let coeffs = block_dots(&self.mass_vectors[..old], &ts);
            block_update(&self.vectors[..old], &coeffs, &mut ts);
            for (b, t) in block.iter_mut().zip(ts) {
                b.1 = t;
            }
        }
        let mut accepted = Vec::new();
        for (idx, mut v, pre) in block {
            for _pass in 0..2 {
                for (w, mw) in self.vectors[old..].iter().zip(&self.mass_vectors[old..]) {
                    let c = dot(mw, &v);
                    axpy(-c, w, &mut v);
                }
            }
            let mut mv = mass.mul_vec(&v);
            let post = dot(&v, &mv).max(0.0).sqrt();
            if post < drop_tol * pre {
                continue;
            }
            let inv = 1.0 / post;
            v.iter_mut().for_each(|x| *x *= inv);
            mv.iter_mut().for_each(|x| *x *= inv);
            self.vectors.push(v);
            self.mass_vectors.push(mv);
            accepted.push(idx);
        }
        accepted
    }
}

const ROW_BLOCK: usize = 2048;

/// `c[t][j] = basis[j]ᵀ ts[t]`, one streaming pass over `basis`.
pub(crate) fn block_dots(basis: &[Vec<f64>], ts: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; basis.len()]; ts.len()];
    let n = basis.first().map_or(0, Vec::len);
    let mut start = 0;
    while start < n {
        let end = (start + ROW_BLOCK).min(n);
        for (j, w) in basis.iter().enumerate() {
            for (ct, t) in c.iter_mut().zip(ts) {
                ct[j] += dot(&w[start..end], &t[start..end]);
            }
        }
        start = end;
    }
    c
}

/// `ts[t] −= Σ_j c[t][j] basis[j]`
fn block_update(basis: &[Vec<f64>], c: &[Vec<f64>], ts: &mut [Vec<f64>]) {
    let n = basis.first().map_or(0, Vec::len);
    let mut start = 0;
    while start < n {
        let end = (start + ROW_BLOCK).min(n);
        for (j, w) in basis.iter().enumerate() {
            for (ct, t) in c.iter().zip(ts.iter_mut()) {
                axpy(-ct[j], &w[start..end], &mut t[start..end]);
            }
        }
        start = end;
    }
}

/// `M`-orthonormalizes `vectors`, dropping near-dependent ones.
pub fn b_orthonormalize(vectors: &[Vec<f64>], mass: &CsrMatrix, drop_tol: f64) -> Result<Vec<Vec<f64>>> {
    if !(drop_tol > 0.0 && drop_tol < 1.0) {
        return Err(invalid(format!("drop tolerance {drop_tol} outside (0, 1)")));
    }
    let mut basis = MassBasis::new();
    basis.extend(mass, vectors.to_vec(), drop_tol);
    if basis.is_empty() {
        return Err(Error::EmptyBasis);
    }
    Ok(basis.into_vectors())
}

/// `WᵀMW` for a list of columns.
pub fn mass_gram(vectors: &[Vec<f64>], mass: &CsrMatrix) -> Mat<f64> {
    let mw: Vec<Vec<f64>> = vectors.iter().map(|v| mass.mul_vec(v)).collect();
    Mat::from_fn(vectors.len(), vectors.len(), |i, j| dot(&vectors[i], &mw[j]))
}
