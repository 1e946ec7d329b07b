//! P1 stiffness and mass assembly with homogeneous Dirichlet dofs eliminated.

use std::io::Write;

use crate::error::{invalid, Result};
use crate::mesh::Mesh;
use crate::sparse::{dot, CsrMatrix};

/// Stiffness `K` (the form `a(u,v) = ∫∇u·∇v`) and consistent mass `M`
/// (`b(u,v) = ∫uv`) on interior dofs.
#[derive(Debug, Clone)]
pub struct SparsePencil {
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
}

impl SparsePencil {
    pub fn n(&self) -> usize {
        self.stiffness.nrows()
    }

    /// `K − σM`
    pub fn shifted(&self, sigma: f64) -> CsrMatrix {
        self.stiffness.add_scaled(&self.mass, -sigma)
    }

    pub fn principal_subpencil(&self, indices: &[usize]) -> SparsePencil {
        SparsePencil {
            stiffness: self.stiffness.principal_submatrix(indices),
            mass: self.mass.principal_submatrix(indices),
        }
    }

    pub fn write_matrix_market<W: Write>(&self, stiffness: W, mass: W) -> Result<()> {
        self.stiffness.write_matrix_market(stiffness)?;
        self.mass.write_matrix_market(mass)
    }
}

/// Element matrices for a triangle given in lattice units (legs of length 1);
/// the stiffness is scale-free in 2D and the mass scales with `g²`.
fn element_matrices(p: [(i64, i64); 3]) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let [(x0, y0), (x1, y1), (x2, y2)] = p;
    let twice_area = ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)) as f64;
    // gradient numerators: ∇φ_k = (b_k, c_k) / (2A)
    let b = [(y1 - y2) as f64, (y2 - y0) as f64, (y0 - y1) as f64];
    let c = [(x2 - x1) as f64, (x0 - x2) as f64, (x1 - x0) as f64];
    let mut k = [[0.0; 3]; 3];
    let mut m = [[0.0; 3]; 3];
    for r in 0..3 {
        for s in 0..3 {
            k[r][s] = (b[r] * b[s] + c[r] * c[s]) / (2.0 * twice_area);
            m[r][s] = twice_area / 24.0 * if r == s { 2.0 } else { 1.0 };
        }
    }
    (k, m)
}

fn assemble_with(mesh: &Mesh, index: impl Fn(usize) -> Option<usize>, n: usize) -> SparsePencil {
    let g2 = mesh.spacing() * mesh.spacing();
    let mut kt = Vec::with_capacity(mesh.triangles().len() * 9);
    let mut mt = Vec::with_capacity(mesh.triangles().len() * 9);
    for tri in mesh.triangles() {
        let p = tri.map(|v| {
            let (i, j) = mesh.node_lattice(v);
            (i as i64, j as i64)
        });
        let (ke, me) = element_matrices(p);
        let ids = tri.map(&index);
        for r in 0..3 {
            let Some(gr) = ids[r] else { continue };
            for s in 0..3 {
                let Some(gs) = ids[s] else { continue };
                kt.push((gr, gs, ke[r][s]));
                mt.push((gr, gs, g2 * me[r][s]));
            }
        }
    }
    SparsePencil {
        stiffness: CsrMatrix::from_triplets(n, n, &kt),
        mass: CsrMatrix::from_triplets(n, n, &mt),
    }
}

/// Assembles `(K, M)` on the interior dofs of `mesh`.
pub fn assemble(mesh: &Mesh) -> SparsePencil {
    assemble_with(mesh, |v| mesh.node_dof(v), mesh.n_dofs())
}

/// Assembly over every lattice node, boundary included (pure Neumann
/// matrices). Used to check exactness of the element integrals.
pub fn assemble_unconstrained(mesh: &Mesh) -> SparsePencil {
    assemble_with(mesh, Some, mesh.n_nodes())
}

/// `vᵀKv / vᵀMv`
pub fn rayleigh_quotient(pencil: &SparsePencil, v: &[f64]) -> Result<f64> {
    if v.len() != pencil.n() {
        return Err(invalid(format!("vector length {} != {}", v.len(), pencil.n())));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(invalid("Rayleigh quotient of the zero vector"));
    }
    let num = dot(v, &pencil.stiffness.mul_vec(v));
    let den = dot(v, &pencil.mass.mul_vec(v));
    Ok(num / den)
}
