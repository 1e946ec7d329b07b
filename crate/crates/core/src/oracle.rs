//! Reference spectra for verification: the analytic Dirichlet spectrum of the
//! square, a brute-force dense discrete eigensolve, and cluster gap checks.
//!
//! The dense route here shares no code with the solver's eigen kernels: the
//! mass matrix is factored by a banded Cholesky, the reduced matrix is brought
//! to tridiagonal form by Householder reflections, eigenvalues come from Sturm
//! bisection and eigenvectors from inverse iteration.

use faer::Mat;
use serde::Serialize;

use crate::eigensolver::ClusterSpec;
use crate::error::{invalid, Error, Result};
use crate::fem::SparsePencil;
use crate::linalg::{dense_symmetric_eig, factorize};
use crate::sparse::{axpy, dot, CsrMatrix};

/// Dense reference guard.
pub const DENSE_LIMIT: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumSource {
    Analytic,
    DenseDiscrete,
}

#[derive(Debug, Clone)]
pub struct SpectrumReference {
    /// ascending, with multiplicity; `values[0]` is `λ_1`
    pub values: Vec<f64>,
    pub source: SpectrumSource,
    /// `M`-orthonormal eigenvectors for `first_vector..first_vector + vectors.len()`
    pub vectors: Vec<Vec<f64>>,
    pub first_vector: usize,
}

impl SpectrumReference {
    /// `λ_i` with 1-based `i`.
    pub fn value(&self, i: usize) -> f64 {
        self.values[i - 1]
    }

    /// Eigenvector for the 1-based index `i`, when computed.
    pub fn vector(&self, i: usize) -> Option<&[f64]> {
        i.checked_sub(1 + self.first_vector)
            .and_then(|k| self.vectors.get(k))
            .map(Vec::as_slice)
    }
}

/// First `count` entries of `{p² + q² : p, q ≥ 1}` in ascending order.
pub fn exact_square_eigenvalues(count: usize) -> SpectrumReference {
    let mut bound = (2 * count).max(2) as u64;
    loop {
        let mut vals = Vec::new();
        let mut p = 1u64;
        while p * p + 1 <= bound {
            let mut q = 1u64;
            while p * p + q * q <= bound {
                vals.push((p * p + q * q) as f64);
                q += 1;
            }
            p += 1;
        }
        if vals.len() >= count {
            vals.sort_by(f64::total_cmp);
            vals.truncate(count);
            return SpectrumReference { values: vals, source: SpectrumSource::Analytic, vectors: Vec::new(), first_vector: 0 };
        }
        bound *= 2;
    }
}

/// Row-major square matrix used only by the reference route.
struct Square {
    n: usize,
    a: Vec<f64>,
}


/// Lower band Cholesky factor: `rows[i][k]` holds `L[i, i - bw + k]`.
struct BandCholesky {
    bw: usize,
    rows: Vec<Vec<f64>>,
}

impl BandCholesky {
    fn new(m: &CsrMatrix) -> Result<Self> {
        let n = m.nrows();
        let bw = m.bandwidth();
        let mut rows = vec![vec![0.0; bw + 1]; n];
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = m.get(i, j);
                let kstart = lo.max(j.saturating_sub(bw));
                for k in kstart..j {
                    s -= rows[i][k + bw - i] * rows[j][k + bw - j];
                }
                if j == i {
                    if s <= 0.0 {
                        return Err(invalid("mass matrix is not positive definite"));
                    }
                    rows[i][bw] = s.sqrt();
                } else {
                    rows[i][j + bw - i] = s / rows[j][bw];
                }
            }
        }
        Ok(Self { bw, rows })
    }

    fn l(&self, i: usize, j: usize) -> f64 {
        if j > i || i - j > self.bw {
            0.0
        } else {
            self.rows[i][j + self.bw - i]
        }
    }

    /// Row-wise forward substitution `X ← L⁻¹ X` on a row-major matrix.
    fn forward_rows(&self, x: &mut Square) {
        let n = x.n;
        for i in 0..n {
            let lo = i.saturating_sub(self.bw);
            let (head, tail) = x.a.split_at_mut(i * n);
            let row = &mut tail[..n];
            for k in lo..i {
                let lik = self.l(i, k);
                if lik != 0.0 {
                    axpy(-lik, &head[k * n..(k + 1) * n], row);
                }
            }
            let inv = 1.0 / self.l(i, i);
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }

    /// `x ← L⁻ᵀ x`
    fn backward(&self, x: &mut [f64]) {
        let n = x.len();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n.min(i + self.bw + 1) {
                s -= self.l(k, i) * x[k];
            }
            x[i] = s / self.l(i, i);
        }
    }
}

/// Householder reduction to tridiagonal form with the reflectors kept.
struct Tridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
    /// reflector `k` acts on entries `k+1..n`
    reflectors: Vec<(Vec<f64>, f64)>,
}

/// Only the lower triangle of `c` is read.
fn tridiagonalize(mut c: Square) -> Tridiagonal {
    let n = c.n;
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n.saturating_sub(1)];
    let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
    let mut p = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        diag[k] = c.a[k * n + k];
        let m = n - k - 1;
        let mut v: Vec<f64> = (k + 1..n).map(|i| c.a[i * n + k]).collect();
        let sigma: f64 = v[1..].iter().map(|x| x * x).sum();
        let x0 = v[0];
        if sigma == 0.0 && m > 0 {
            off[k] = x0;
            reflectors.push((Vec::new(), 0.0));
            continue;
        }
        let norm = (x0 * x0 + sigma).sqrt();
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        v[0] = x0 - alpha;
        let beta = 2.0 / (v[0] * v[0] + sigma);
        off[k] = alpha;
        // p = β·A22·v from the lower triangle, then w = p − (β/2)(pᵀv)v
        let pk = &mut p[..m];
        pk.iter_mut().for_each(|x| *x = 0.0);
        for r in 0..m {
            let row = &c.a[(k + 1 + r) * n + k + 1..(k + 1 + r) * n + k + 2 + r];
            let (strict, diag_entry) = row.split_at(r);
            pk[r] += dot(strict, &v[..r]) + diag_entry[0] * v[r];
            axpy(v[r], strict, &mut pk[..r]);
        }
        pk.iter_mut().for_each(|x| *x *= beta);
        let kappa = 0.5 * beta * dot(pk, &v);
        axpy(-kappa, &v, pk);
        for r in 0..m {
            let (vr, wr) = (v[r], pk[r]);
            let row = &mut c.a[(k + 1 + r) * n + k + 1..(k + 1 + r) * n + k + 2 + r];
            for ((a, &vs), &ws) in row.iter_mut().zip(&v[..=r]).zip(&pk[..=r]) {
                *a -= vr * ws + wr * vs;
            }
        }
        reflectors.push((v, beta));
    }
    if n > 0 {
        diag[n - 1] = c.a[n * n - 1];
    }
    Tridiagonal { diag, off, reflectors }
}

impl Tridiagonal {
    fn norm_bound(&self) -> f64 {
        let n = self.diag.len();
        (0..n)
            .map(|i| {
                self.diag[i].abs()
                    + if i > 0 { self.off[i - 1].abs() } else { 0.0 }
                    + if i + 1 < n { self.off[i].abs() } else { 0.0 }
            })
            .fold(0.0, f64::max)
    }

    /// Eigenvalues strictly below `x`.
    fn sturm_count(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = 1.0;
        let floor = f64::MIN_POSITIVE.sqrt();
        for i in 0..self.diag.len() {
            let e2 = if i > 0 { self.off[i - 1] * self.off[i - 1] } else { 0.0 };
            q = self.diag[i] - x - if i > 0 { e2 / q } else { 0.0 };
            if q.abs() < floor {
                q = -floor;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    /// The `k`-th smallest eigenvalue (0-based) by bisection.
    fn eigenvalue(&self, k: usize) -> f64 {
        let r = self.norm_bound();
        let (mut lo, mut hi) = (-r - 1.0, r + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.sturm_count(mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Solves `(T − λI) z = b` by Gaussian elimination with partial pivoting.
    fn shifted_solve(&self, lambda: f64, b: &mut [f64], floor: f64) {
        let n = self.diag.len();
        // rows of U: (u0, u1, u2) on columns (i, i+1, i+2)
        let mut u = vec![[0.0f64; 3]; n];
        let mut d = self.diag.iter().map(|x| x - lambda).collect::<Vec<_>>();
        let mut cur = [d[0], if n > 1 { self.off[0] } else { 0.0 }, 0.0];
        for i in 0..n {
            if i + 1 == n {
                u[i] = cur;
                break;
            }
            let below = [self.off[i], d[i + 1], if i + 2 < n { self.off[i + 1] } else { 0.0 }];
            let (pivot_row, other) = if below[0].abs() > cur[0].abs() {
                b.swap(i, i + 1);
                (below, cur)
            } else {
                (cur, below)
            };
            let piv = if pivot_row[0].abs() < floor { floor.copysign(pivot_row[0]) } else { pivot_row[0] };
            let mult = other[0] / piv;
            u[i] = [piv, pivot_row[1], pivot_row[2]];
            b[i + 1] -= mult * b[i];
            cur = [other[1] - mult * pivot_row[1], other[2] - mult * pivot_row[2], 0.0];
            d[i + 1] = cur[0];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            if i + 1 < n {
                s -= u[i][1] * b[i + 1];
            }
            if i + 2 < n {
                s -= u[i][2] * b[i + 2];
            }
            let piv = if u[i][0].abs() < floor { floor.copysign(u[i][0]) } else { u[i][0] };
            b[i] = s / piv;
        }
    }

    /// Applies `Q = H_0 H_1 ⋯` to a vector of the tridiagonal basis.
    fn back_transform(&self, z: &mut [f64]) {
        for (k, (v, beta)) in self.reflectors.iter().enumerate().rev() {
            if v.is_empty() {
                continue;
            }
            let tail = &mut z[k + 1..];
            let s = beta * dot(v, tail);
            axpy(-s, v, tail);
        }
    }
}

struct Reduced {
    chol: BandCholesky,
    tri: Tridiagonal,
}

fn reduce(pencil: &SparsePencil) -> Result<Reduced> {
    let n = pencil.n();
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge { dofs: n, limit: DENSE_LIMIT });
    }
    let chol = BandCholesky::new(&pencil.mass)?;
    let mut x = Square { n, a: vec![0.0; n * n] };
    for i in 0..n {
        let (cols, vals) = pencil.stiffness.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            x.a[i * n + c] = v;
        }
    }
    // X = L⁻¹K, then C = L⁻¹Xᵀ = L⁻¹KL⁻ᵀ
    chol.forward_rows(&mut x);
    let mut c = Square { n, a: vec![0.0; n * n] };
    for i in 0..n {
        for j in 0..n {
            c.a[j * n + i] = x.a[i * n + j];
        }
    }
    drop(x);
    chol.forward_rows(&mut c);
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (c.a[i * n + j] + c.a[j * n + i]);
            c.a[i * n + j] = s;
            c.a[j * n + i] = s;
        }
    }
    Ok(Reduced { chol, tri: tridiagonalize(c) })
}

/// First `count` generalized eigenvalues of `(K, M)`.
pub fn dense_discrete_spectrum(pencil: &SparsePencil, count: usize) -> Result<SpectrumReference> {
    dense_discrete_eigenpairs(pencil, count, 0..0)
}

/// First `count` eigenvalues plus `M`-orthonormal eigenvectors for the
/// 0-based index range `vectors`.
pub fn dense_discrete_eigenpairs(
    pencil: &SparsePencil,
    count: usize,
    vectors: std::ops::Range<usize>,
) -> Result<SpectrumReference> {
    let n = pencil.n();
    if count > n || vectors.end > n {
        return Err(invalid(format!("requested {count} eigenvalues of a {n}-dof pencil")));
    }
    let red = reduce(pencil)?;
    let count = count.max(vectors.end);
    let values: Vec<f64> = (0..count).map(|k| red.tri.eigenvalue(k)).collect();
    let tnorm = red.tri.norm_bound().max(f64::MIN_POSITIVE);
    let floor = f64::EPSILON * tnorm;
    let mut tri_vectors: Vec<Vec<f64>> = Vec::new();
    let mut cluster_start = 0;
    for k in vectors.clone() {
        let lambda = values[k];
        if k > vectors.start && lambda - values[k - 1] > 1e-3 * tnorm {
            cluster_start = tri_vectors.len();
        }
        let mut z: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i * 7919 + k * 104729) % 1013) as f64 / 1013.0).collect();
        for _ in 0..4 {
            red.tri.shifted_solve(lambda, &mut z, floor);
            for _pass in 0..2 {
                for prev in &tri_vectors[cluster_start..] {
                    let c = dot(prev, &z);
                    axpy(-c, prev, &mut z);
                }
            }
            let nz = dot(&z, &z).sqrt();
            z.iter_mut().for_each(|v| *v /= nz);
        }
        tri_vectors.push(z);
    }
    let vectors_out = tri_vectors
        .into_iter()
        .map(|mut z| {
            red.tri.back_transform(&mut z);
            red.chol.backward(&mut z);
            z
        })
        .collect();
    Ok(SpectrumReference { values, source: SpectrumSource::DenseDiscrete, vectors: vectors_out, first_vector: vectors.start })
}

/// Smallest eigenpair of `(K, M)` by shift-free inverse iteration; works at
/// any size since it only needs a sparse factorization of `K`.
pub fn smallest_eigenvalue(pencil: &SparsePencil, tol: f64) -> Result<f64> {
    let f = factorize(&pencil.stiffness, true)?;
    let n = pencil.n();
    let mut v = vec![1.0; n];
    let mut lambda = f64::INFINITY;
    for _ in 0..500 {
        let mv = pencil.mass.mul_vec(&v);
        let w = f.solve(&mv);
        let kw = pencil.stiffness.mul_vec(&w);
        let mw = pencil.mass.mul_vec(&w);
        let next = dot(&w, &kw) / dot(&w, &mw);
        let norm = dot(&w, &mw).sqrt();
        v = w.into_iter().map(|x| x / norm).collect();
        if (lambda - next).abs() <= tol * next {
            return Ok(next);
        }
        lambda = next;
    }
    Ok(lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterGaps {
    /// `d_m^- = λ_m − λ_{m−1}` with `λ_0 = 0`
    pub left: f64,
    /// `d_M^+ = λ_{M+1} − λ_M`
    pub right: f64,
    pub warning: Option<String>,
}

pub fn cluster_gaps(reference: &SpectrumReference, cluster: ClusterSpec) -> Result<ClusterGaps> {
    let (m, upper) = (cluster.m, cluster.upper);
    if upper + 1 > reference.values.len() {
        return Err(invalid(format!(
            "reference holds {} values, cluster ({m},{upper}) needs {}",
            reference.values.len(),
            upper + 1
        )));
    }
    let below = if m == 1 { 0.0 } else { reference.value(m - 1) };
    let left = reference.value(m) - below;
    let right = reference.value(upper + 1) - reference.value(upper);
    let scale = reference.value(upper + 1).abs().max(1.0);
    let warning = if left <= 1e-10 * scale || right <= 1e-10 * scale {
        Some(format!("cluster ({m},{upper}) splits a multiplet: gaps ({left}, {right})"))
    } else {
        None
    };
    Ok(ClusterGaps { left, right, warning })
}

/// Sine of the largest principal angle between `span(u)` and `span(v)` in
/// the `M` inner product. Both sets must be `M`-orthonormal.
pub fn max_principal_angle_sin(u: &[Vec<f64>], v: &[Vec<f64>], mass: &CsrMatrix) -> f64 {
    let mv: Vec<Vec<f64>> = v.iter().map(|x| mass.mul_vec(x)).collect();
    let residuals: Vec<Vec<f64>> = u
        .iter()
        .map(|x| {
            let mut r = x.clone();
            for (vj, mvj) in v.iter().zip(&mv) {
                axpy(-dot(mvj, x), vj, &mut r);
            }
            r
        })
        .collect();
    let mr: Vec<Vec<f64>> = residuals.iter().map(|r| mass.mul_vec(r)).collect();
    let g = Mat::from_fn(u.len(), u.len(), |i, j| dot(&residuals[i], &mr[j]));
    let eig = dense_symmetric_eig(&g).expect("small Gram eigensolve");
    eig.values.last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Ratios `e_{k+1} / e_k` of the total cluster error
/// `e_k = Σ_i (λ_i^k − λ_i^h)` over consecutive iterations where both errors
/// sit above `floor`. `history[k]` holds `λ_m^k..λ_M^k`.
pub fn total_error_ratios(history: &[Vec<f64>], reference: &[f64], floor: f64) -> Vec<f64> {
    let errors: Vec<f64> = history
        .iter()
        .map(|vals| vals.iter().zip(reference).map(|(a, b)| a - b).sum())
        .collect();
    errors
        .windows(2)
        .filter(|w| w[0] > floor && w[1] > floor)
        .map(|w| w[1] / w[0])
        .collect()
}

pub fn geometric_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|&v| v <= 0.0) {
        return None;
    }
    Some((values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use crate::linalg::dense_generalized_eig;
    use crate::mesh::{build_mesh, DomainShape};

    fn naive(count: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for p in 1..=count as u64 {
            for q in 1..=count as u64 {
                v.push((p * p + q * q) as f64);
            }
        }
        v.sort_by(f64::total_cmp);
        v.truncate(count);
        v
    }

    #[test]
    fn analytic_square_spectrum() {
        assert_eq!(exact_square_eigenvalues(4).values, vec![2.0, 5.0, 5.0, 8.0]);
        let r = exact_square_eigenvalues(203);
        assert_eq!(&r.values[98..108], &[145.0, 145.0, 145.0, 145.0, 146.0, 146.0, 148.0, 148.0, 149.0, 149.0]);
        assert_eq!(&r.values[197..203], &[272.0, 272.0, 274.0, 274.0, 277.0, 277.0]);
        assert_eq!(exact_square_eigenvalues(600).values, naive(600));
    }

    #[test]
    fn gaps() {
        let r = exact_square_eigenvalues(120);
        let g = cluster_gaps(&r, ClusterSpec::new(1, 1).unwrap()).unwrap();
        assert_eq!((g.left, g.right), (2.0, 3.0));
        assert!(g.warning.is_none());
        let g = cluster_gaps(&r, ClusterSpec::new(99, 108).unwrap()).unwrap();
        // λ_98 = 137 (4² + 11²), λ_109 = 153 (3² + 12²)
        assert_eq!((g.left, g.right), (8.0, 4.0));
        let g = cluster_gaps(&r, ClusterSpec::new(99, 100).unwrap()).unwrap();
        assert_eq!(g.right, 0.0);
        assert!(g.warning.is_some());
    }

    #[test]
    fn level_one_reference() {
        let p = assemble(&build_mesh(DomainShape::Square, 1).unwrap());
        let r = dense_discrete_spectrum(&p, 1).unwrap();
        let g = std::f64::consts::PI / 2.0;
        assert!((r.values[0] - 8.0 / (g * g)).abs() < 1e-12);
    }

    #[test]
    fn dense_reference_agrees_with_cholesky_route() {
        for shape in [DomainShape::Square, DomainShape::LShape] {
            let p = assemble(&build_mesh(shape, 3).unwrap());
            let n = p.n();
            let r = dense_discrete_eigenpairs(&p, n, 0..n).unwrap();
            let e = dense_generalized_eig(&p.stiffness.to_dense(), &p.mass.to_dense()).unwrap();
            for (a, b) in r.values.iter().zip(&e.values) {
                assert!((a - b).abs() <= 1e-9 * b, "{shape}: {a} vs {b}");
            }
            for (k, v) in r.vectors.iter().enumerate() {
                let kv = p.stiffness.mul_vec(v);
                let mv = p.mass.mul_vec(v);
                assert!((dot(v, &mv) - 1.0).abs() < 1e-10);
                let res: f64 = kv.iter().zip(&mv).map(|(a, b)| (a - r.values[k] * b).powi(2)).sum::<f64>().sqrt();
                assert!(res < 1e-8 * r.values[k], "{shape} residual {res} at {k}");
            }
        }
    }

    #[test]
    fn discrete_bounds_analytic_from_above() {
        let p = assemble(&build_mesh(DomainShape::Square, 5).unwrap());
        let r = dense_discrete_spectrum(&p, 10).unwrap();
        let exact = exact_square_eigenvalues(10);
        for (d, e) in r.values.iter().zip(&exact.values) {
            assert!(d >= e);
        }
    }

    #[test]
    fn permutation_invariance() {
        let p = assemble(&build_mesh(DomainShape::LShape, 2).unwrap());
        let n = p.n();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
        assert!({
            let mut s = perm.clone();
            s.sort();
            s == (0..n).collect::<Vec<_>>()
        });
        let permute = |a: &CsrMatrix| {
            let mut t = Vec::new();
            for i in 0..n {
                let (cols, vals) = a.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    t.push((perm[i], perm[c], v));
                }
            }
            CsrMatrix::from_triplets(n, n, &t)
        };
        let q = SparsePencil { stiffness: permute(&p.stiffness), mass: permute(&p.mass) };
        let a = dense_discrete_spectrum(&p, n).unwrap();
        let b = dense_discrete_spectrum(&q, n).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() <= 1e-11 * x);
        }
    }

    #[test]
    fn inverse_iteration_matches_dense() {
        let p = assemble(&build_mesh(DomainShape::Square, 4).unwrap());
        let a = smallest_eigenvalue(&p, 1e-15).unwrap();
        let b = dense_discrete_spectrum(&p, 1).unwrap().values[0];
        assert!((a - b).abs() < 1e-11 * b);
    }

    #[test]
    fn too_large_guard() {
        let p = assemble(&build_mesh(DomainShape::Square, 7).unwrap());
        assert!(matches!(dense_discrete_spectrum(&p, 1), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn error_ratio_helpers() {
        let hist = vec![vec![3.0, 5.0], vec![2.0, 4.0], vec![1.5, 3.5]];
        let r = total_error_ratios(&hist, &[1.0, 3.0], 0.0);
        assert_eq!(r, vec![0.5, 0.5]);
        assert!((geometric_mean(&r).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(geometric_mean(&[]), None);
    }
}
