//! Structured P1 triangulations of the unit-spacing lattice on the square
//! `(0,π)²` and the L-shaped domain `(−π,π)² \ [0,π)×(−π,0]`, nested mesh
//! hierarchies with nodal interpolation, and overlapping subdomain
//! decompositions built from coarse grid cells.
//!
//! Nodes are addressed by lattice coordinates `(i, j)` with physical position
//! `origin + (i, j)·g`. Only nodes strictly inside the domain carry a degree of
//! freedom; dofs are numbered lexicographically by `(j, i)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainShape {
    Square,
    LShape,
}

impl DomainShape {
    /// Lattice cells along one side at the given refinement level.
    pub fn cells_per_side(self, level: u32) -> usize {
        match self {
            DomainShape::Square => 1 << level,
            DomainShape::LShape => 1 << (level + 1),
        }
    }

    pub fn origin(self) -> f64 {
        match self {
            DomainShape::Square => 0.0,
            DomainShape::LShape => -PI,
        }
    }

    /// `g = π / 2^level` for both shapes.
    pub fn spacing(self, level: u32) -> f64 {
        PI / (1u64 << level) as f64
    }

    pub fn area(self) -> f64 {
        match self {
            DomainShape::Square => PI * PI,
            DomainShape::LShape => 3.0 * PI * PI,
        }
    }

    /// Whether lattice cell `(ci, cj)` (lower-left corner) lies in the domain.
    /// `n` is the number of cells per side.
    pub fn cell_in_domain(self, ci: usize, cj: usize, n: usize) -> bool {
        if ci >= n || cj >= n {
            return false;
        }
        match self {
            DomainShape::Square => true,
            // removed quadrant is x ∈ [0, π), y ∈ (−π, 0]
            DomainShape::LShape => !(ci >= n / 2 && cj < n / 2),
        }
    }

    /// Closed-form interior dof count.
    pub fn expected_dofs(self, level: u32) -> usize {
        match self {
            DomainShape::Square => {
                let s = (1usize << level) - 1;
                s * s
            }
            DomainShape::LShape => {
                let s = (1usize << (level + 1)) - 1;
                let q = 1usize << level;
                s * s - q * q
            }
        }
    }
}

impl std::fmt::Display for DomainShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainShape::Square => write!(f, "square"),
            DomainShape::LShape => write!(f, "lshape"),
        }
    }
}

impl std::str::FromStr for DomainShape {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "square" => Ok(DomainShape::Square),
            "lshape" | "l-shape" | "l_shape" => Ok(DomainShape::LShape),
            other => Err(invalid(format!("unknown domain '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    shape: DomainShape,
    level: u32,
    spacing: f64,
    cells: usize,
    node_dof: Vec<Option<usize>>,
    dof_nodes: Vec<(usize, usize)>,
    triangles: Vec<[usize; 3]>,
}

pub fn build_mesh(shape: DomainShape, level: u32) -> Result<Mesh> {
    if level == 0 {
        return Err(invalid("mesh level must be at least 1"));
    }
    if level > 14 {
        return Err(invalid(format!("mesh level {level} is beyond supported sizes")));
    }
    let n = shape.cells_per_side(level);
    let stride = n + 1;
    let mut node_dof = vec![None; stride * stride];
    let mut dof_nodes = Vec::with_capacity(shape.expected_dofs(level));
    for j in 1..n {
        for i in 1..n {
            let interior = shape.cell_in_domain(i - 1, j - 1, n)
                && shape.cell_in_domain(i, j - 1, n)
                && shape.cell_in_domain(i - 1, j, n)
                && shape.cell_in_domain(i, j, n);
            if interior {
                node_dof[j * stride + i] = Some(dof_nodes.len());
                dof_nodes.push((i, j));
            }
        }
    }
    let mut triangles = Vec::new();
    for cj in 0..n {
        for ci in 0..n {
            if !shape.cell_in_domain(ci, cj, n) {
                continue;
            }
            let v00 = cj * stride + ci;
            let v10 = v00 + 1;
            let v01 = v00 + stride;
            let v11 = v01 + 1;
            // every cell is split along its lower-left to upper-right diagonal
            triangles.push([v00, v10, v11]);
            triangles.push([v00, v11, v01]);
        }
    }
    Ok(Mesh { shape, level, spacing: shape.spacing(level), cells: n, node_dof, dof_nodes, triangles })
}

impl Mesh {
    pub fn shape(&self) -> DomainShape {
        self.shape
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Lattice spacing `g`.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Mesh size `h = √2·g`, the length of a cell diagonal.
    pub fn mesh_size(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.spacing
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells
    }

    pub fn n_dofs(&self) -> usize {
        self.dof_nodes.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.node_dof.len()
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn node_lattice(&self, node: usize) -> (usize, usize) {
        (node % (self.cells + 1), node / (self.cells + 1))
    }

    pub fn node_coords(&self, node: usize) -> (f64, f64) {
        let (i, j) = self.node_lattice(node);
        self.lattice_coords(i, j)
    }

    pub fn lattice_coords(&self, i: usize, j: usize) -> (f64, f64) {
        let o = self.shape.origin();
        (o + i as f64 * self.spacing, o + j as f64 * self.spacing)
    }

    pub fn node_dof(&self, node: usize) -> Option<usize> {
        self.node_dof[node]
    }

    pub fn dof_at(&self, i: usize, j: usize) -> Option<usize> {
        if i > self.cells || j > self.cells {
            return None;
        }
        self.node_dof[j * (self.cells + 1) + i]
    }

    pub fn dof_lattice(&self, dof: usize) -> (usize, usize) {
        self.dof_nodes[dof]
    }

    pub fn dof_coords(&self, dof: usize) -> (f64, f64) {
        let (i, j) = self.dof_nodes[dof];
        self.lattice_coords(i, j)
    }

    /// Signed area of a triangle from its node coordinates.
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|v| {
            let (i, j) = self.node_lattice(v);
            (i as i64, j as i64)
        });
        let twice = (b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1);
        twice as f64 * 0.5 * self.spacing * self.spacing
    }

    /// Evaluates the nodal interpolant of `values` at a lattice point of
    /// this mesh given in fractional cell units.
    fn interpolation_weights(&self, x: f64, y: f64) -> Vec<(usize, f64)> {
        let n = self.cells;
        let ci = (x.floor() as usize).min(n - 1);
        let cj = (y.floor() as usize).min(n - 1);
        let s = x - ci as f64;
        let t = y - cj as f64;
        let corners = [
            (ci, cj, if s >= t { 1.0 - s } else { 1.0 - t }),
            (ci + 1, cj, if s >= t { s - t } else { 0.0 }),
            (ci + 1, cj + 1, if s >= t { t } else { s }),
            (ci, cj + 1, if s >= t { 0.0 } else { t - s }),
        ];
        corners
            .into_iter()
            .filter(|&(_, _, w)| w != 0.0)
            .filter_map(|(i, j, w)| self.dof_at(i, j).map(|d| (d, w)))
            .collect()
    }
}

/// Nodal interpolation from `coarse` into `fine` (a `fine_dofs × coarse_dofs`
/// matrix). Both meshes must share shape and `coarse.level < fine.level`.
pub fn prolongation(coarse: &Mesh, fine: &Mesh) -> Result<CsrMatrix> {
    if coarse.shape != fine.shape {
        return Err(invalid("prolongation between different domains"));
    }
    if coarse.level > fine.level {
        return Err(invalid("prolongation needs coarse level <= fine level"));
    }
    let ratio = (1usize << (fine.level - coarse.level)) as f64;
    let mut trip = Vec::new();
    for d in 0..fine.n_dofs() {
        let (i, j) = fine.dof_lattice(d);
        for (c, w) in coarse.interpolation_weights(i as f64 / ratio, j as f64 / ratio) {
            trip.push((d, c, w));
        }
    }
    Ok(CsrMatrix::from_triplets(fine.n_dofs(), coarse.n_dofs(), &trip))
}

/// Nested meshes `T_H ⊆ T_H̃ ⊆ T_h` with interpolation into the fine space.
#[derive(Debug, Clone)]
pub struct MeshHierarchy {
    pub coarse: Mesh,
    pub initial: Mesh,
    pub fine: Mesh,
    /// fine × coarse
    pub prolong_coarse: CsrMatrix,
    /// fine × initial
    pub prolong_initial: CsrMatrix,
}

/// Hierarchy with the initial mesh one level above the coarse one (`H̃ = H/2`).
pub fn build_hierarchy(shape: DomainShape, coarse_level: u32, fine_level: u32) -> Result<MeshHierarchy> {
    if coarse_level + 1 > fine_level {
        return Err(invalid(format!(
            "levels not nested: coarse {coarse_level} needs coarse + 1 <= fine {fine_level}"
        )));
    }
    build_hierarchy_with_initial(shape, coarse_level, coarse_level + 1, fine_level)
}

/// Hierarchy with an explicit initial level, `coarse <= initial <= fine` and
/// `coarse < fine`.
pub fn build_hierarchy_with_initial(
    shape: DomainShape,
    coarse_level: u32,
    initial_level: u32,
    fine_level: u32,
) -> Result<MeshHierarchy> {
    if !(coarse_level <= initial_level && initial_level <= fine_level && coarse_level < fine_level) {
        return Err(invalid(format!(
            "levels not nested: coarse {coarse_level}, initial {initial_level}, fine {fine_level}"
        )));
    }
    let coarse = build_mesh(shape, coarse_level)?;
    let initial = build_mesh(shape, initial_level)?;
    let fine = build_mesh(shape, fine_level)?;
    let prolong_coarse = prolongation(&coarse, &fine)?;
    let prolong_initial = prolongation(&initial, &fine)?;
    Ok(MeshHierarchy { coarse, initial, fine, prolong_coarse, prolong_initial })
}

impl MeshHierarchy {
    pub fn shape(&self) -> DomainShape {
        self.fine.shape
    }

    /// Fine cells per coarse cell along one side.
    pub fn refinement_ratio(&self) -> usize {
        1 << (self.fine.level - self.coarse.level)
    }
}

/// Overlapping subdomains `Ω'_l`, each the fine dofs strictly inside a coarse
/// cell (or block of cells) dilated by `overlap_layers` fine cells.
#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    pub subdomains: Vec<Vec<usize>>,
    pub overlap_layers: usize,
    pub overlap_ratio: f64,
    pub color_count: usize,
    pub n_dofs: usize,
}

pub fn build_decomposition(hier: &MeshHierarchy, overlap_ratio: f64) -> Result<Decomposition> {
    build_decomposition_with(hier, overlap_ratio, 1)
}

/// As [`build_decomposition`], grouping `agglomerate × agglomerate` coarse
/// cells into each nonoverlapping piece.
pub fn build_decomposition_with(
    hier: &MeshHierarchy,
    overlap_ratio: f64,
    agglomerate: usize,
) -> Result<Decomposition> {
    if !(overlap_ratio > 0.0 && overlap_ratio <= 0.5) {
        return Err(invalid(format!("overlap ratio {overlap_ratio} outside (0, 1/2]")));
    }
    if agglomerate == 0 {
        return Err(invalid("agglomeration factor must be positive"));
    }
    let ratio = hier.refinement_ratio();
    let layers_exact = overlap_ratio * ratio as f64;
    if layers_exact < 1.0 - 1e-12 {
        return Err(invalid(format!(
            "overlap {overlap_ratio}·H is below one fine layer ({layers_exact:.3} layers)"
        )));
    }
    let layers = (layers_exact.round() as usize).max(1);
    let shape = hier.shape();
    let coarse_n = hier.coarse.cells_per_side();
    let fine = &hier.fine;
    let fine_n = fine.cells_per_side();
    let mut subdomains = Vec::new();
    let blocks = coarse_n.div_ceil(agglomerate);
    for bj in 0..blocks {
        for bi in 0..blocks {
            let cells: Vec<(usize, usize)> = (0..agglomerate)
                .flat_map(|dj| (0..agglomerate).map(move |di| (bi * agglomerate + di, bj * agglomerate + dj)))
                .filter(|&(ci, cj)| shape.cell_in_domain(ci, cj, coarse_n))
                .collect();
            if cells.is_empty() {
                continue;
            }
            let mut set = Vec::new();
            for (ci, cj) in &cells {
                let lo_i = (ci * ratio) as isize - layers as isize;
                let hi_i = ((ci + 1) * ratio + layers) as isize;
                let lo_j = (cj * ratio) as isize - layers as isize;
                let hi_j = ((cj + 1) * ratio + layers) as isize;
                for j in (lo_j + 1).max(1)..hi_j.min(fine_n as isize) {
                    for i in (lo_i + 1).max(1)..hi_i.min(fine_n as isize) {
                        if let Some(d) = fine.dof_at(i as usize, j as usize) {
                            set.push(d);
                        }
                    }
                }
            }
            set.sort_unstable();
            set.dedup();
            if !set.is_empty() {
                subdomains.push(set);
            }
        }
    }
    Decomposition::from_index_sets(subdomains, fine.n_dofs(), layers, overlap_ratio)
}

impl Decomposition {
    /// Wraps caller-provided index sets, validating coverage and computing the
    /// greedy coloring of the intersection graph.
    pub fn from_index_sets(
        mut subdomains: Vec<Vec<usize>>,
        n_dofs: usize,
        overlap_layers: usize,
        overlap_ratio: f64,
    ) -> Result<Self> {
        let mut owners: Vec<Vec<usize>> = vec![Vec::new(); n_dofs];
        for (l, set) in subdomains.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            for &d in set.iter() {
                if d >= n_dofs {
                    return Err(invalid(format!("subdomain {l} references dof {d} >= {n_dofs}")));
                }
                owners[d].push(l);
            }
        }
        if let Some(d) = owners.iter().position(|o| o.is_empty()) {
            return Err(invalid(format!("dof {d} is not covered by any subdomain")));
        }
        let color_count = greedy_color_count(subdomains.len(), &owners);
        Ok(Self { subdomains, overlap_layers, overlap_ratio, color_count, n_dofs })
    }

    pub fn len(&self) -> usize {
        self.subdomains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subdomains.is_empty()
    }

    /// Largest number of subdomains sharing a single dof.
    pub fn max_multiplicity(&self) -> usize {
        let mut count = vec![0usize; self.n_dofs];
        for set in &self.subdomains {
            for &d in set {
                count[d] += 1;
            }
        }
        count.into_iter().max().unwrap_or(0)
    }
}

fn greedy_color_count(n_sub: usize, owners: &[Vec<usize>]) -> usize {
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n_sub];
    for o in owners {
        for &a in o {
            for &b in o {
                if a != b {
                    adjacency[a].push(b);
                }
            }
        }
    }
    let mut colors = vec![usize::MAX; n_sub];
    let mut used = Vec::new();
    for l in 0..n_sub {
        let adj = &mut adjacency[l];
        adj.sort_unstable();
        adj.dedup();
        used.clear();
        used.extend(adj.iter().map(|&b| colors[b]).filter(|&c| c != usize::MAX));
        used.sort_unstable();
        used.dedup();
        let mut c = 0;
        while used.binary_search(&c).is_ok() {
            c += 1;
        }
        colors[l] = c;
    }
    colors.iter().map(|&c| c + 1).max().unwrap_or(0)
}
