//! The forward deformation reconstructed from a reference map, per-node
//! Jacobians, and the volume-density mismatch error.
//!
//! The reference map gives, at each grid node x, the reference location
//! xi(x). Querying the forward map inverts this: given a reference location
//! it returns the deformed position. Each hexahedral grid cell is split into
//! six tetrahedra along a fixed diagonal pattern (the same pattern in every
//! cell, so shared faces agree and interpolation is continuous); the xi
//! values are the tetra vertex coordinates, carrying the undeformed node
//! coordinates as ordinates, and interpolation is barycentric-linear inside
//! each tetrahedron.

use crate::grid::{DensityField, GridSpec, ReferenceMap, ScalarField, VectorField};
use crate::solver::Embedding;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ForwardMapError {
    #[error("degenerate cell {cell:?}: tetrahedron {tet} has non-positive volume {volume:e}")]
    DegenerateCell {
        cell: (usize, usize, usize),
        tet: usize,
        volume: f64,
    },
    #[error("point {point:?} is outside the deformed hull (nearest deformed node at distance {nearest_node_distance:e})")]
    OutOfHull {
        point: [f64; 3],
        nearest_node_distance: f64,
    },
    #[error("singular Jacobian at node ({i}, {j}, {k}): |det| = {det:e}")]
    SingularJacobian { i: usize, j: usize, k: usize, det: f64 },
    #[error("{excluded} of {total} nodes have singular Jacobians (more than 1%)")]
    TooManySingular { excluded: usize, total: usize },
    #[error("density and reference map are defined on different grids")]
    MismatchedGrids,
    #[error("embedding record does not fit the reference map grid")]
    BadEmbedding,
}

/// Corner offsets of the six tetrahedra tiling a unit cell, all positively
/// oriented. Every cell uses the same split, so face diagonals match
/// between neighboring cells.
const TETS: [[[usize; 3]; 4]; 6] = [
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 1, 1]],
    [[0, 0, 0], [1, 0, 1], [1, 0, 0], [1, 1, 1]],
    [[0, 0, 0], [1, 1, 0], [0, 1, 0], [1, 1, 1]],
    [[0, 0, 0], [0, 1, 0], [0, 1, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1]],
    [[0, 0, 0], [0, 1, 1], [0, 0, 1], [1, 1, 1]],
];

const BARY_TOL: f64 = 1e-10;

#[inline]
fn det3(c0: [f64; 3], c1: [f64; 3], c2: [f64; 3]) -> f64 {
    c0[0] * (c1[1] * c2[2] - c1[2] * c2[1]) - c1[0] * (c0[1] * c2[2] - c0[2] * c2[1])
        + c2[0] * (c0[1] * c1[2] - c0[2] * c1[1])
}

/// Queryable deformation built from a reference map.
pub struct ForwardMap {
    grid: GridSpec,
    xi: VectorField,
    bbox_min: [f64; 3],
    hash_dims: [usize; 3],
    hash_step: [f64; 3],
    buckets: Vec<Vec<u32>>,
}

impl ForwardMap {
    fn cells(&self) -> (usize, usize, usize) {
        let (l, m, n) = self.grid.dims();
        (l - 1, m - 1, n - 1)
    }

    /// Linear node indices of the four vertices of tetrahedron `tet`.
    fn tet_nodes(&self, tet: u32) -> [usize; 4] {
        let (cl, cm, _) = self.cells();
        let cell = tet as usize / 6;
        let t = tet as usize % 6;
        let ci = cell % cl;
        let cj = (cell / cl) % cm;
        let ck = cell / (cl * cm);
        let mut out = [0usize; 4];
        for (v, off) in TETS[t].iter().enumerate() {
            out[v] = self.grid.index(ci + off[0], cj + off[1], ck + off[2]);
        }
        out
    }

    fn vertex(&self, node: usize) -> [f64; 3] {
        [
            self.xi.x().values()[node],
            self.xi.y().values()[node],
            self.xi.z().values()[node],
        ]
    }

    fn ordinate(&self, node: usize) -> [f64; 3] {
        let (i, j, k) = self.grid.node(node);
        self.grid.coords(i, j, k)
    }

    fn hash_cell(&self, p: [f64; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for axis in 0..3 {
            let rel = (p[axis] - self.bbox_min[axis]) / self.hash_step[axis];
            out[axis] = (rel.floor().max(0.0) as usize).min(self.hash_dims[axis] - 1);
        }
        out
    }

    fn bucket_index(&self, c: [usize; 3]) -> usize {
        c[0] + self.hash_dims[0] * (c[1] + self.hash_dims[1] * c[2])
    }

    /// Barycentric coordinates of `p` in tetrahedron `tet`, or `None` when
    /// `p` lies outside it (tolerance `1e-10` on the coordinates).
    fn barycentric(&self, tet: u32, p: [f64; 3]) -> Option<[f64; 4]> {
        let nodes = self.tet_nodes(tet);
        let a = self.vertex(nodes[0]);
        let b = self.vertex(nodes[1]);
        let c = self.vertex(nodes[2]);
        let d = self.vertex(nodes[3]);
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let e3 = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
        let rhs = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
        let det = det3(e1, e2, e3);
        if det == 0.0 {
            return None;
        }
        let l1 = det3(rhs, e2, e3) / det;
        let l2 = det3(e1, rhs, e3) / det;
        let l3 = det3(e1, e2, rhs) / det;
        let l0 = 1.0 - l1 - l2 - l3;
        let lam = [l0, l1, l2, l3];
        if lam.iter().all(|l| *l >= -BARY_TOL) {
            Some(lam)
        } else {
            None
        }
    }

    fn locate(&self, p: [f64; 3]) -> Option<(u32, [f64; 4])> {
        let home = self.hash_cell(p);
        // The home bucket first; points on shared faces resolve to the
        // lowest tetrahedron id because buckets are filled in id order.
        for tet in &self.buckets[self.bucket_index(home)] {
            if let Some(lam) = self.barycentric(*tet, p) {
                return Some((*tet, lam));
            }
        }
        let mut candidates: Vec<u32> = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    let c = [
                        home[0] as i64 + dx,
                        home[1] as i64 + dy,
                        home[2] as i64 + dz,
                    ];
                    if (0..3).any(|a| c[a] < 0 || c[a] >= self.hash_dims[a] as i64) {
                        continue;
                    }
                    candidates
                        .extend(&self.buckets[self.bucket_index([c[0] as usize, c[1] as usize, c[2] as usize])]);
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        for tet in candidates {
            if let Some(lam) = self.barycentric(tet, p) {
                return Some((tet, lam));
            }
        }
        None
    }

    /// Evaluates the deformation at a reference location `p`.
    pub fn query(&self, p: [f64; 3]) -> Result<[f64; 3], ForwardMapError> {
        let (tet, lam) = self.locate(p).ok_or_else(|| {
            let mut nearest = f64::INFINITY;
            for node in 0..self.grid.node_count() {
                let v = self.vertex(node);
                let d2 = (v[0] - p[0]).powi(2) + (v[1] - p[1]).powi(2) + (v[2] - p[2]).powi(2);
                nearest = nearest.min(d2);
            }
            ForwardMapError::OutOfHull {
                point: p,
                nearest_node_distance: nearest.sqrt(),
            }
        })?;
        let nodes = self.tet_nodes(tet);
        let mut out = [0.0f64; 3];
        for (v, node) in nodes.iter().enumerate() {
            let o = self.ordinate(*node);
            for axis in 0..3 {
                out[axis] += lam[v] * o[axis];
            }
        }
        Ok(out)
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }
}

/// Builds the forward map, checking every tetrahedron for positive
/// orientation in reference (xi-value) space.
pub fn build_forward_map(xi: &ReferenceMap) -> Result<ForwardMap, ForwardMapError> {
    let grid = xi.grid();
    let (l, m, n) = grid.dims();
    let xs = xi.x().values();
    let ys = xi.y().values();
    let zs = xi.z().values();

    let mut bbox_min = [f64::INFINITY; 3];
    let mut bbox_max = [f64::NEG_INFINITY; 3];
    for idx in 0..grid.node_count() {
        let p = [xs[idx], ys[idx], zs[idx]];
        for axis in 0..3 {
            bbox_min[axis] = bbox_min[axis].min(p[axis]);
            bbox_max[axis] = bbox_max[axis].max(p[axis]);
        }
    }

    let hash_dims = [l - 1, m - 1, n - 1];
    let mut hash_step = [0.0f64; 3];
    for axis in 0..3 {
        let extent = bbox_max[axis] - bbox_min[axis];
        hash_step[axis] = if extent > 0.0 {
            extent / hash_dims[axis] as f64
        } else {
            1.0
        };
    }

    let mut map = ForwardMap {
        grid,
        xi: xi.as_vector().clone(),
        bbox_min,
        hash_dims,
        hash_step,
        buckets: vec![Vec::new(); hash_dims[0] * hash_dims[1] * hash_dims[2]],
    };

    let tet_count = 6 * (l - 1) * (m - 1) * (n - 1);
    for tet in 0..tet_count as u32 {
        let nodes = map.tet_nodes(tet);
        let a = map.vertex(nodes[0]);
        let b = map.vertex(nodes[1]);
        let c = map.vertex(nodes[2]);
        let d = map.vertex(nodes[3]);
        let vol = det3(
            [b[0] - a[0], b[1] - a[1], b[2] - a[2]],
            [c[0] - a[0], c[1] - a[1], c[2] - a[2]],
            [d[0] - a[0], d[1] - a[1], d[2] - a[2]],
        ) / 6.0;
        if vol <= 0.0 {
            let cell = tet as usize / 6;
            let (cl, cm, _) = map.cells();
            return Err(ForwardMapError::DegenerateCell {
                cell: (cell % cl, (cell / cl) % cm, cell / (cl * cm)),
                tet: tet as usize % 6,
                volume: vol,
            });
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in [a, b, c, d] {
            for axis in 0..3 {
                lo[axis] = lo[axis].min(p[axis]);
                hi[axis] = hi[axis].max(p[axis]);
            }
        }
        let clo = map.hash_cell(lo);
        let chi = map.hash_cell(hi);
        for ck in clo[2]..=chi[2] {
            for cj in clo[1]..=chi[1] {
                for ci in clo[0]..=chi[0] {
                    let b = map.bucket_index([ci, cj, ck]);
                    map.buckets[b].push(tet);
                }
            }
        }
    }
    Ok(map)
}

/// Convenience alias matching the build/query pair.
pub fn query(fm: &ForwardMap, p: [f64; 3]) -> Result<[f64; 3], ForwardMapError> {
    fm.query(p)
}

/// Per-node deformation Jacobians `F = (d xi / d x)^{-1}`.
#[derive(Debug, Clone)]
pub struct JacobianField {
    grid: GridSpec,
    /// Row-major `F` per node; `None` where `d xi / d x` is singular.
    inverse: Vec<Option<[f64; 9]>>,
    /// `det F` per node (0 at singular nodes).
    det: Vec<f64>,
    singular: Vec<usize>,
}

impl JacobianField {
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn f(&self, i: usize, j: usize, k: usize) -> Option<[f64; 9]> {
        self.inverse[self.grid.index(i, j, k)]
    }

    /// `det F` at a node; 0 marks a singular node.
    pub fn det_f(&self, i: usize, j: usize, k: usize) -> f64 {
        self.det[self.grid.index(i, j, k)]
    }

    pub fn det_values(&self) -> &[f64] {
        &self.det
    }

    pub fn singular_nodes(&self) -> &[usize] {
        &self.singular
    }
}

const SINGULAR_DET: f64 = 1e-12;

/// `d xi / d x` by central differences at interior nodes and one-sided
/// two-point differences at faces, inverted per node.
///
/// Errors on the first singular node; use [`jacobian_field_lenient`] when
/// singular nodes should be recorded instead.
pub fn jacobian_field(xi: &ReferenceMap) -> Result<JacobianField, ForwardMapError> {
    let field = jacobian_field_lenient(xi);
    if let Some(first) = field.singular.first() {
        let (i, j, k) = field.grid.node(*first);
        return Err(ForwardMapError::SingularJacobian { i, j, k, det: 0.0 });
    }
    Ok(field)
}

/// As [`jacobian_field`], but collects singular nodes rather than failing.
pub fn jacobian_field_lenient(xi: &ReferenceMap) -> JacobianField {
    let grid = xi.grid();
    let (l, m, n) = grid.dims();
    let h = grid.spacing();
    let comps = [xi.x().values(), xi.y().values(), xi.z().values()];
    let lm = l * m;
    let strides = [1usize, l, lm];
    let sizes = [l, m, n];

    let count = grid.node_count();
    let mut inverse = vec![None; count];
    let mut det = vec![0.0f64; count];
    let mut singular = Vec::new();

    for k in 0..n {
        for j in 0..m {
            for i in 0..l {
                let idx = grid.index(i, j, k);
                let pos = [i, j, k];
                // j_mat[r][c] = d xi_r / d x_c
                let mut j_mat = [[0.0f64; 3]; 3];
                for (c, (&stride, &size)) in strides.iter().zip(&sizes).enumerate() {
                    let p = pos[c];
                    for (r, comp) in comps.iter().enumerate() {
                        j_mat[r][c] = if p == 0 {
                            (comp[idx + stride] - comp[idx]) / h
                        } else if p == size - 1 {
                            (comp[idx] - comp[idx - stride]) / h
                        } else {
                            (comp[idx + stride] - comp[idx - stride]) / (2.0 * h)
                        };
                    }
                }
                let d = det3(
                    [j_mat[0][0], j_mat[1][0], j_mat[2][0]],
                    [j_mat[0][1], j_mat[1][1], j_mat[2][1]],
                    [j_mat[0][2], j_mat[1][2], j_mat[2][2]],
                );
                if d.abs() < SINGULAR_DET {
                    singular.push(idx);
                    continue;
                }
                // Inverse by the adjugate.
                let a = j_mat;
                let inv = [
                    (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / d,
                    (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / d,
                    (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / d,
                    (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / d,
                    (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / d,
                    (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / d,
                    (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / d,
                    (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / d,
                    (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / d,
                ];
                inverse[idx] = Some(inv);
                det[idx] = 1.0 / d;
            }
        }
    }

    JacobianField {
        grid,
        inverse,
        det,
        singular,
    }
}

/// Histogram of the mismatch error: 64 uniform bins over
/// `[-max|e|, max|e|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 64;

/// The volume-density mismatch error and its summary statistics.
#[derive(Debug, Clone)]
pub struct MismatchReport {
    /// `e` per evaluated node (0 at excluded nodes), on the evaluation
    /// sub-block's grid.
    pub e: ScalarField,
    /// Region-local linear indices of nodes excluded for singular
    /// Jacobians.
    pub excluded: Vec<usize>,
    pub mean_abs_e: f64,
    pub histogram: Histogram,
}

/// Trapezoidal weight along one axis of a block of `size` nodes.
#[inline]
fn trapezoid_weight(pos: usize, size: usize) -> f64 {
    if pos == 0 || pos == size - 1 {
        0.5
    } else {
        1.0
    }
}

/// Evaluates `e(x) = log[(det F / I_F) / (rho0(xi(x)) / I_rho)]` with both
/// integrals by the tensor-product trapezoidal rule.
///
/// `rho0` is the prescribed density on the same (solve) grid as `xi`. For
/// free-boundary runs pass the embedding record; `e` is then evaluated only
/// over the original domain sub-block and the sea is excluded.
pub fn mismatch_error(
    xi: &ReferenceMap,
    rho0: &DensityField,
    region: Option<&Embedding>,
) -> Result<MismatchReport, ForwardMapError> {
    let grid = xi.grid();
    if rho0.grid() != grid {
        return Err(ForwardMapError::MismatchedGrids);
    }
    let (off, dims) = match region {
        Some(emb) => {
            let (l, m, n) = grid.dims();
            let (ox, oy, oz) = emb.offsets;
            let (il, im, inn) = emb.inner_dims;
            if ox + il > l || oy + im > m || oz + inn > n {
                return Err(ForwardMapError::BadEmbedding);
            }
            ([ox, oy, oz], [il, im, inn])
        }
        None => {
            let (l, m, n) = grid.dims();
            ([0, 0, 0], [l, m, n])
        }
    };
    let h = grid.spacing();
    let jac = jacobian_field_lenient(xi);

    let total = dims[0] * dims[1] * dims[2];
    let region_grid = GridSpec::new((dims[0], dims[1], dims[2]), h)
        .map_err(|_| ForwardMapError::BadEmbedding)?;

    // First pass: trapezoidal integrals over non-singular region nodes.
    let mut integral_det = 0.0f64;
    let mut integral_rho = 0.0f64;
    let mut excluded = Vec::new();
    let h3 = h * h * h;
    for rk in 0..dims[2] {
        for rj in 0..dims[1] {
            for ri in 0..dims[0] {
                let node = grid.index(off[0] + ri, off[1] + rj, off[2] + rk);
                let w = h3
                    * trapezoid_weight(ri, dims[0])
                    * trapezoid_weight(rj, dims[1])
                    * trapezoid_weight(rk, dims[2]);
                let d = jac.det[node];
                if jac.inverse[node].is_none() || d <= 0.0 {
                    excluded.push(region_grid.index(ri, rj, rk));
                    continue;
                }
                integral_det += w * d;
                integral_rho += w * rho0.values()[node];
            }
        }
    }
    if excluded.len() * 100 > total {
        return Err(ForwardMapError::TooManySingular {
            excluded: excluded.len(),
            total,
        });
    }

    // Second pass: the error itself.
    let mut e_values = vec![0.0f64; total];
    let mut excluded_mask = vec![false; total];
    for idx in &excluded {
        excluded_mask[*idx] = true;
    }
    let mut abs_sum = 0.0f64;
    let mut max_abs = 0.0f64;
    for rk in 0..dims[2] {
        for rj in 0..dims[1] {
            for ri in 0..dims[0] {
                let ridx = region_grid.index(ri, rj, rk);
                if excluded_mask[ridx] {
                    continue;
                }
                let node = grid.index(off[0] + ri, off[1] + rj, off[2] + rk);
                let ref_loc = [
                    xi.x().values()[node],
                    xi.y().values()[node],
                    xi.z().values()[node],
                ];
                let rho_at_ref = rho0.sample_trilinear_clamped(ref_loc);
                let d = jac.det[node];
                let e = ((d / integral_det) / (rho_at_ref / integral_rho)).ln();
                e_values[ridx] = e;
                abs_sum += e.abs();
                max_abs = max_abs.max(e.abs());
            }
        }
    }
    let evaluated = total - excluded.len();
    let mean_abs_e = if evaluated > 0 { abs_sum / evaluated as f64 } else { 0.0 };

    let span = if max_abs > 0.0 { max_abs } else { 1.0 };
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for (ridx, e) in e_values.iter().enumerate() {
        if excluded_mask[ridx] {
            continue;
        }
        let t = (e + span) / (2.0 * span) * HISTOGRAM_BINS as f64;
        let bin = (t.floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }

    Ok(MismatchReport {
        e: ScalarField::from_values(region_grid, e_values)
            .expect("mismatch values are finite"),
        excluded,
        mean_abs_e,
        histogram: Histogram {
            lo: -span,
            hi: span,
            counts,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid(l: usize, m: usize, n: usize) -> GridSpec {
        GridSpec::new((l, m, n), 1.0).unwrap()
    }

    /// Reference map `xi = A x + b` evaluated at the nodes.
    fn affine_map(g: GridSpec, a: [[f64; 3]; 3], b: [f64; 3]) -> ReferenceMap {
        let comp = |r: usize| {
            ScalarField::from_fn(g, |i, j, k| {
                let p = g.coords(i, j, k);
                a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + b[r]
            })
        };
        ReferenceMap::from_components(VectorField::new(comp(0), comp(1), comp(2)).unwrap())
    }

    fn mat_vec(a: [[f64; 3]; 3], x: [f64; 3]) -> [f64; 3] {
        [
            a[0][0] * x[0] + a[0][1] * x[1] + a[0][2] * x[2],
            a[1][0] * x[0] + a[1][1] * x[1] + a[1][2] * x[2],
            a[2][0] * x[0] + a[2][1] * x[1] + a[2][2] * x[2],
        ]
    }

    fn mat_inv(a: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let d = det3(
            [a[0][0], a[1][0], a[2][0]],
            [a[0][1], a[1][1], a[2][1]],
            [a[0][2], a[1][2], a[2][2]],
        );
        [
            [
                (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / d,
                (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / d,
                (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / d,
            ],
            [
                (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / d,
                (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / d,
                (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / d,
            ],
            [
                (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / d,
                (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / d,
                (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / d,
            ],
        ]
    }

    #[test]
    fn identity_query_is_identity() {
        let fm = build_forward_map(&ReferenceMap::identity(grid(6, 6, 6))).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let p = [
                rng.gen_range(0.0..5.0),
                rng.gen_range(0.0..5.0),
                rng.gen_range(0.0..5.0),
            ];
            let q = fm.query(p).unwrap();
            for axis in 0..3 {
                assert!((q[axis] - p[axis]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn uniform_shrink_queries_halve() {
        // xi = 2x: grid points map from a half-size box, so querying p
        // returns p/2.
        let scale = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let fm = build_forward_map(&affine_map(grid(6, 6, 6), scale, [0.0; 3])).unwrap();
        for p in [[1.0, 2.0, 3.0], [4.4, 0.2, 7.9], [9.0, 9.0, 9.0]] {
            let q = fm.query(p).unwrap();
            for axis in 0..3 {
                assert!((q[axis] - p[axis] / 2.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn node_queries_return_node_coordinates() {
        let g = grid(8, 8, 8);
        let rho = presets::peaks(g);
        let result = crate::solver::solve(
            &rho,
            &crate::solver::BoundarySpec::no_flux(),
            &crate::solver::SolverConfig::default(),
        )
        .unwrap();
        let fm = build_forward_map(&result.xi_final).unwrap();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    let p = result.xi_final.at(i, j, k);
                    let q = fm.query(p).unwrap();
                    let want = g.coords(i, j, k);
                    for axis in 0..3 {
                        assert!(
                            (q[axis] - want[axis]).abs() <= 1e-9,
                            "node ({i},{j},{k}) axis {axis}: {} vs {}",
                            q[axis],
                            want[axis]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn tetra_centroid_is_vertex_average() {
        let fm = build_forward_map(&ReferenceMap::identity(grid(4, 4, 4))).unwrap();
        let nodes = fm.tet_nodes(0);
        let mut centroid = [0.0f64; 3];
        let mut avg = [0.0f64; 3];
        for node in nodes {
            let v = fm.vertex(node);
            let o = fm.ordinate(node);
            for axis in 0..3 {
                centroid[axis] += v[axis] / 4.0;
                avg[axis] += o[axis] / 4.0;
            }
        }
        let q = fm.query(centroid).unwrap();
        for axis in 0..3 {
            assert!((q[axis] - avg[axis]).abs() <= 1e-12);
        }
    }

    #[test]
    fn affine_query_matches_closed_form_inverse() {
        let mut rng = StdRng::seed_from_u64(17);
        let g = grid(6, 6, 6);
        for _ in 0..10 {
            let mut a = [[0.0f64; 3]; 3];
            for (r, row) in a.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = if r == c { 1.0 } else { 0.0 } + rng.gen_range(-0.15..0.15);
                }
            }
            let b = [
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            ];
            let fm = build_forward_map(&affine_map(g, a, b)).unwrap();
            for _ in 0..20 {
                let x = [
                    rng.gen_range(1.0..4.0),
                    rng.gen_range(1.0..4.0),
                    rng.gen_range(1.0..4.0),
                ];
                let p = {
                    let ax = mat_vec(a, x);
                    [ax[0] + b[0], ax[1] + b[1], ax[2] + b[2]]
                };
                let q = fm.query(p).unwrap();
                for axis in 0..3 {
                    assert!((q[axis] - x[axis]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn jacobian_identity_and_scaling() {
        let g = grid(6, 6, 6);
        let jac = jacobian_field(&ReferenceMap::identity(g)).unwrap();
        for k in 0..6 {
            for j in 0..6 {
                for i in 0..6 {
                    let f = jac.f(i, j, k).unwrap();
                    let want = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
                    for (a, b) in f.iter().zip(&want) {
                        assert!((a - b).abs() <= 1e-12);
                    }
                    assert!((jac.det_f(i, j, k) - 1.0).abs() <= 1e-12);
                }
            }
        }

        let scale = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]];
        let jac = jacobian_field(&affine_map(g, scale, [0.0; 3])).unwrap();
        for &(i, j, k) in &[(0, 0, 0), (3, 3, 3), (5, 5, 5)] {
            let f = jac.f(i, j, k).unwrap();
            assert!((f[0] - 0.5).abs() <= 1e-12);
            assert!((f[4] - 0.5).abs() <= 1e-12);
            assert!((f[8] - 0.5).abs() <= 1e-12);
            assert!((jac.det_f(i, j, k) - 0.125).abs() <= 1e-12);
        }
    }

    #[test]
    fn jacobian_random_affine_is_inverse_matrix() {
        let mut rng = StdRng::seed_from_u64(29);
        let g = grid(6, 6, 6);
        let mut a = [[0.0f64; 3]; 3];
        for (r, row) in a.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = if r == c { 1.0 } else { 0.0 } + rng.gen_range(-0.2..0.2);
            }
        }
        let jac = jacobian_field(&affine_map(g, a, [0.0; 3])).unwrap();
        let inv = mat_inv(a);
        for k in 1..5 {
            for j in 1..5 {
                for i in 1..5 {
                    let f = jac.f(i, j, k).unwrap();
                    for r in 0..3 {
                        for c in 0..3 {
                            assert!((f[3 * r + c] - inv[r][c]).abs() <= 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn mismatch_identity_uniform_is_zero() {
        let g = grid(6, 6, 6);
        let rho = presets::uniform(g, 2.0).unwrap();
        let report = mismatch_error(&ReferenceMap::identity(g), &rho, None).unwrap();
        for e in report.e.values() {
            assert!(e.abs() <= 1e-14);
        }
        assert!(report.mean_abs_e <= 1e-14);
        assert!(report.excluded.is_empty());
    }

    #[test]
    fn mismatch_identity_nonuniform_sign() {
        let g = grid(8, 8, 8);
        let rho = presets::peaks(g);
        let report = mismatch_error(&ReferenceMap::identity(g), &rho, None).unwrap();
        // At the max-density node the identity map under-delivers volume,
        // so e < 0 there.
        let mut max_node = (0, 0, 0);
        let mut max_val = f64::NEG_INFINITY;
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    if rho.at(i, j, k) > max_val {
                        max_val = rho.at(i, j, k);
                        max_node = (i, j, k);
                    }
                }
            }
        }
        assert!(report.e.at(max_node.0, max_node.1, max_node.2) < 0.0);
        assert!(report.mean_abs_e > 0.0);
    }

    #[test]
    fn mismatch_is_scale_invariant() {
        let g = grid(8, 8, 8);
        let rho = presets::peaks(g);
        let scaled = DensityField::new(
            ScalarField::from_values(g, rho.values().iter().map(|v| 7.3 * v).collect()).unwrap(),
        )
        .unwrap();
        let xi = ReferenceMap::identity(g);
        let a = mismatch_error(&xi, &rho, None).unwrap();
        let b = mismatch_error(&xi, &scaled, None).unwrap();
        for (x, y) in a.e.values().iter().zip(b.e.values()) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert!((a.mean_abs_e - b.mean_abs_e).abs() <= 1e-12);
    }

    #[test]
    fn normalization_integral_is_one() {
        let g = grid(8, 8, 8);
        let rho = presets::peaks(g);
        let result = crate::solver::solve(
            &rho,
            &crate::solver::BoundarySpec::no_flux(),
            &crate::solver::SolverConfig::default(),
        )
        .unwrap();
        let jac = jacobian_field_lenient(&result.xi_final);
        let h3 = 1.0;
        let mut integral = 0.0;
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    let w = h3
                        * trapezoid_weight(i, 8)
                        * trapezoid_weight(j, 8)
                        * trapezoid_weight(k, 8);
                    integral += w * jac.det_f(i, j, k);
                }
            }
        }
        let normalized: f64 = {
            let mut acc = 0.0;
            for k in 0..8 {
                for j in 0..8 {
                    for i in 0..8 {
                        let w = h3
                            * trapezoid_weight(i, 8)
                            * trapezoid_weight(j, 8)
                            * trapezoid_weight(k, 8);
                        acc += w * jac.det_f(i, j, k) / integral;
                    }
                }
            }
            acc
        };
        assert!((normalized - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn out_of_hull_reports_distance() {
        let fm = build_forward_map(&ReferenceMap::identity(grid(4, 4, 4))).unwrap();
        match fm.query([50.0, 50.0, 50.0]) {
            Err(ForwardMapError::OutOfHull {
                nearest_node_distance,
                ..
            }) => {
                assert!(nearest_node_distance > 10.0);
            }
            other => panic!("expected OutOfHull, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_cell_is_rejected() {
        let g = grid(4, 4, 4);
        // Collapse every x-value to a constant: all tetrahedra flatten.
        let flat = ScalarField::new(g, 1.0);
        let xi = ReferenceMap::from_components(
            VectorField::new(
                flat,
                ScalarField::from_fn(g, |_, j, _| j as f64),
                ScalarField::from_fn(g, |_, _, k| k as f64),
            )
            .unwrap(),
        );
        assert!(matches!(
            build_forward_map(&xi),
            Err(ForwardMapError::DegenerateCell { .. })
        ));
    }
}
