//! Backward-Euler diffusion step: the matrix `A = I - dt * kappa * Lap` with
//! the seven-point stencil and no-flux ghost nodes, solved by conjugate
//! gradients.
//!
//! The stencil is applied matrix-free. Each missing neighbor at a boundary
//! face is replaced by the node's own value (ghost node), which is the same
//! as counting only in-domain neighbors on the diagonal. Row sums are
//! therefore exactly 1 and the operator is symmetric positive definite.

use crate::grid::{GridSpec, ScalarField};
use crate::parallel;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("timestep must be positive and finite, got {0}")]
    BadTimestep(f64),
    #[error("diffusion coefficient must be positive and finite, got {0}")]
    BadKappa(f64),
    #[error("right-hand side is defined on a different grid")]
    MismatchedGrids,
    #[error("invalid CG settings: rel_tolerance {rel_tolerance}, max_iters {max_iters}")]
    BadSettings { rel_tolerance: f64, max_iters: usize },
    #[error(
        "CG did not converge in {iterations} iterations (relative residual {achieved:e}, target {target:e})"
    )]
    NonConvergence {
        iterations: usize,
        achieved: f64,
        target: f64,
    },
}

/// The implicit diffusion operator `I - dt * kappa * Lap` on a grid.
///
/// Only the per-node diagonal is stored; every off-diagonal coupling toward
/// an existing neighbor has the same value `-dt * kappa / h^2`.
#[derive(Debug, Clone)]
pub struct StencilMatrix {
    grid: GridSpec,
    /// `dt * kappa / h^2`.
    coupling: f64,
    diag: Vec<f64>,
}

impl StencilMatrix {
    /// `diag(node) = 1 + dt * kappa / h^2 * (in-domain neighbor count)`.
    pub fn assemble(grid: GridSpec, dt: f64, kappa: f64) -> Result<Self, DiffusionError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DiffusionError::BadTimestep(dt));
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(DiffusionError::BadKappa(kappa));
        }
        let h = grid.spacing();
        let coupling = dt * kappa / (h * h);
        let (l, m, n) = grid.dims();
        let mut diag = Vec::with_capacity(grid.node_count());
        for k in 0..n {
            for j in 0..m {
                for i in 0..l {
                    let nb = (i > 0) as usize
                        + (i < l - 1) as usize
                        + (j > 0) as usize
                        + (j < m - 1) as usize
                        + (k > 0) as usize
                        + (k < n - 1) as usize;
                    diag.push(1.0 + coupling * nb as f64);
                }
            }
        }
        Ok(Self {
            grid,
            coupling,
            diag,
        })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    /// Matrix-vector product `A x`.
    ///
    /// Neighbor contributions are summed in axis pairs, `(xm + xp) + (ym +
    /// yp) + (zm + zp)`, so the per-node arithmetic is invariant under axis
    /// reflections of the data.
    pub fn apply(&self, x: &ScalarField) -> ScalarField {
        assert_eq!(x.grid(), self.grid, "matvec on mismatched grids");
        let (l, m, n) = self.grid.dims();
        let lm = l * m;
        let vals = x.values();
        let mut out = vec![0.0f64; vals.len()];
        let coupling = self.coupling;
        let diag = &self.diag;
        out.par_chunks_mut(lm).enumerate().for_each(|(k, slab)| {
            for j in 0..m {
                for i in 0..l {
                    let idx = i + l * (j + m * k);
                    let c = vals[idx];
                    let sx = if i > 0 { vals[idx - 1] } else { 0.0 }
                        + if i < l - 1 { vals[idx + 1] } else { 0.0 };
                    let sy = if j > 0 { vals[idx - l] } else { 0.0 }
                        + if j < m - 1 { vals[idx + l] } else { 0.0 };
                    let sz = if k > 0 { vals[idx - lm] } else { 0.0 }
                        + if k < n - 1 { vals[idx + lm] } else { 0.0 };
                    slab[i + l * j] = diag[idx] * c - coupling * ((sx + sy) + sz);
                }
            }
        });
        ScalarField::from_values(self.grid, out).expect("matvec output is finite")
    }
}

/// Stopping parameters for the conjugate gradient solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    /// Target on `||A x - b||_2 / ||b||_2`.
    pub rel_tolerance: f64,
    pub max_iters: usize,
}

impl CgSettings {
    pub const DEFAULT_REL_TOLERANCE: f64 = 1e-10;

    /// Defaults for a grid: tolerance `1e-10`, `max_iters = 10 (L + M + N)`.
    pub fn for_grid(grid: GridSpec) -> Self {
        let (l, m, n) = grid.dims();
        Self {
            rel_tolerance: Self::DEFAULT_REL_TOLERANCE,
            max_iters: 10 * (l + m + n),
        }
    }

    fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.rel_tolerance > 0.0 && self.rel_tolerance < 1.0) || self.max_iters == 0 {
            return Err(DiffusionError::BadSettings {
                rel_tolerance: self.rel_tolerance,
                max_iters: self.max_iters,
            });
        }
        Ok(())
    }
}

/// Output of [`cg_solve`]: the solution plus convergence bookkeeping.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: ScalarField,
    pub iterations: usize,
    /// Achieved `||b - A x||_2`.
    pub residual_norm: f64,
}

/// Plain (unpreconditioned) conjugate gradients, warm-started from
/// `warm_start`.
///
/// Dot products use fixed-order chunked reductions, so the returned values
/// are bit-identical across runs and thread counts.
pub fn cg_solve(
    a: &StencilMatrix,
    b: &ScalarField,
    settings: &CgSettings,
    warm_start: &ScalarField,
) -> Result<CgSolution, DiffusionError> {
    if b.grid() != a.grid() || warm_start.grid() != a.grid() {
        return Err(DiffusionError::MismatchedGrids);
    }
    settings.validate()?;

    let b_norm = b.l2_norm();
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x: ScalarField::new(a.grid(), 0.0),
            iterations: 0,
            residual_norm: 0.0,
        });
    }
    let target = settings.rel_tolerance * b_norm;

    let mut x = warm_start.clone();
    let ax = a.apply(&x);
    let mut r: Vec<f64> = b
        .values()
        .iter()
        .zip(ax.values())
        .map(|(bi, axi)| bi - axi)
        .collect();
    let mut rs = parallel::dot(&r, &r);
    if rs.sqrt() <= target {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual_norm: rs.sqrt(),
        });
    }

    let mut p = r.clone();
    for iter in 1..=settings.max_iters {
        let p_field = ScalarField::from_values(a.grid(), p.clone())
            .map_err(|_| DiffusionError::NonConvergence {
                iterations: iter,
                achieved: f64::NAN,
                target: settings.rel_tolerance,
            })?;
        let ap = a.apply(&p_field);
        let pap = parallel::dot(&p, ap.values());
        let alpha = rs / pap;
        parallel::axpy(alpha, &p, x.values_mut());
        parallel::axpy(-alpha, ap.values(), &mut r);
        let rs_new = parallel::dot(&r, &r);
        if rs_new.sqrt() <= target {
            return Ok(CgSolution {
                x,
                iterations: iter,
                residual_norm: rs_new.sqrt(),
            });
        }
        let beta = rs_new / rs;
        rs = rs_new;
        parallel::xpby(&r, beta, &mut p);
    }

    Err(DiffusionError::NonConvergence {
        iterations: settings.max_iters,
        achieved: rs.sqrt() / b_norm,
        target: settings.rel_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn grid4() -> GridSpec {
        GridSpec::new((4, 4, 4), 1.0).unwrap()
    }

    /// Dense Gaussian-elimination oracle for `A x = b` on small grids.
    pub(crate) fn dense_solve(a: &StencilMatrix, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let g = a.grid();
        let mut dense = vec![vec![0.0f64; n + 1]; n];
        for col in 0..n {
            let mut e = ScalarField::new(g, 0.0);
            e.values_mut()[col] = 1.0;
            let ae = a.apply(&e);
            for (row, v) in ae.values().iter().enumerate() {
                dense[row][col] = *v;
            }
        }
        for (row, bv) in b.iter().enumerate() {
            dense[row][n] = *bv;
        }
        // Gaussian elimination with partial pivoting.
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&a, &b| dense[a][col].abs().total_cmp(&dense[b][col].abs()))
                .unwrap();
            dense.swap(col, pivot);
            let d = dense[col][col];
            for row in col + 1..n {
                let f = dense[row][col] / d;
                for c in col..=n {
                    let sub = f * dense[col][c];
                    dense[row][c] -= sub;
                }
            }
        }
        let mut x = vec![0.0f64; n];
        for row in (0..n).rev() {
            let mut s = dense[row][n];
            for c in row + 1..n {
                s -= dense[row][c] * x[c];
            }
            x[row] = s / dense[row][row];
        }
        x
    }

    #[test]
    fn uniform_vector_is_fixed_point() {
        let a = StencilMatrix::assemble(grid4(), 0.37, 2.5).unwrap();
        let u = ScalarField::new(grid4(), 3.25);
        let au = a.apply(&u);
        for v in au.values() {
            assert!((v - 3.25).abs() <= 1e-13);
        }
    }

    #[test]
    fn diagonal_entries_by_node_class() {
        // dt = 1, kappa = 1, h = 1: diag = 1 + neighbor count.
        let g = grid4();
        let a = StencilMatrix::assemble(g, 1.0, 1.0).unwrap();
        let diag_at = |i: usize, j: usize, k: usize| {
            let mut e = ScalarField::new(g, 0.0);
            e.values_mut()[g.index(i, j, k)] = 1.0;
            a.apply(&e).at(i, j, k)
        };
        assert_eq!(diag_at(1, 1, 1), 7.0); // interior
        assert_eq!(diag_at(0, 1, 1), 6.0); // face
        assert_eq!(diag_at(0, 0, 1), 5.0); // edge
        assert_eq!(diag_at(0, 0, 0), 4.0); // corner
    }

    #[test]
    fn delta_vector_spreads_to_six_neighbors() {
        let g = GridSpec::new((6, 6, 6), 1.0).unwrap();
        let a = StencilMatrix::assemble(g, 0.8, 1.0).unwrap();
        let mut e = ScalarField::new(g, 0.0);
        e.values_mut()[g.index(3, 3, 3)] = 1.0;
        let ae = a.apply(&e);
        let mut nonzero = 0;
        for idx in 0..g.node_count() {
            let v = ae.values()[idx];
            if v != 0.0 {
                nonzero += 1;
                let (i, j, k) = g.node(idx);
                if (i, j, k) == (3, 3, 3) {
                    assert_eq!(v, 1.0 + 6.0 * 0.8);
                } else {
                    assert_eq!(v, -0.8);
                }
            }
        }
        assert_eq!(nonzero, 7);
    }

    #[test]
    fn cg_matches_dense_solve() {
        let mut rng = StdRng::seed_from_u64(7);
        let g = grid4();
        let a = StencilMatrix::assemble(g, 0.9, 1.3).unwrap();
        let values: Vec<f64> = (0..64).map(|_| rng.gen_range(0.5..5.0)).collect();
        let b = ScalarField::from_values(g, values).unwrap();
        let settings = CgSettings {
            rel_tolerance: 1e-12,
            max_iters: 500,
        };
        let sol = cg_solve(&a, &b, &settings, &b).unwrap();
        let oracle = dense_solve(&a, b.values());
        for (x, y) in sol.x.values().iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-8, "{x} vs {y}");
        }
    }

    #[test]
    fn cg_uniform_rhs_converges_immediately() {
        let g = grid4();
        let a = StencilMatrix::assemble(g, 2.0, 1.0).unwrap();
        let b = ScalarField::new(g, 4.0);
        let sol = cg_solve(&a, &b, &CgSettings::for_grid(g), &b).unwrap();
        assert_eq!(sol.iterations, 0);
        assert_eq!(sol.x, b);
    }

    #[test]
    fn cg_recovers_known_solution() {
        let mut rng = StdRng::seed_from_u64(11);
        let g = grid4();
        let a = StencilMatrix::assemble(g, 0.5, 1.0).unwrap();
        let y = ScalarField::from_values(g, (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let b = a.apply(&y);
        let start = ScalarField::new(g, 0.0);
        let sol = cg_solve(&a, &b, &CgSettings::for_grid(g), &start).unwrap();
        for (x, t) in sol.x.values().iter().zip(y.values()) {
            assert!((x - t).abs() <= 1e-7);
        }
    }

    #[test]
    fn cg_conserves_mass() {
        let mut rng = StdRng::seed_from_u64(23);
        let g = GridSpec::new((6, 5, 4), 1.0).unwrap();
        let a = StencilMatrix::assemble(g, 1.7, 1.0).unwrap();
        let b = ScalarField::from_values(
            g,
            (0..g.node_count()).map(|_| rng.gen_range(0.1..3.0)).collect(),
        )
        .unwrap();
        let settings = CgSettings::for_grid(g);
        let sol = cg_solve(&a, &b, &settings, &b).unwrap();
        let bound =
            10.0 * settings.rel_tolerance * b.l2_norm() * (g.node_count() as f64).sqrt();
        assert!((sol.x.sum() - b.sum()).abs() <= bound);
    }

    #[test]
    fn operator_is_symmetric() {
        let mut rng = StdRng::seed_from_u64(5);
        let g = GridSpec::new((5, 4, 6), 0.5).unwrap();
        let a = StencilMatrix::assemble(g, 0.3, 2.0).unwrap();
        for _ in 0..5 {
            let u = ScalarField::from_values(
                g,
                (0..g.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let w = ScalarField::from_values(
                g,
                (0..g.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let lhs = parallel::dot(a.apply(&u).values(), w.values());
            let rhs = parallel::dot(u.values(), a.apply(&w).values());
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn cg_non_convergence_reports_residual() {
        let g = grid4();
        let a = StencilMatrix::assemble(g, 50.0, 1.0).unwrap();
        let mut b = ScalarField::new(g, 0.0);
        b.values_mut()[0] = 1.0;
        let settings = CgSettings {
            rel_tolerance: 1e-14,
            max_iters: 1,
        };
        let start = ScalarField::new(g, 0.0);
        match cg_solve(&a, &b, &settings, &start) {
            Err(DiffusionError::NonConvergence { iterations, achieved, .. }) => {
                assert_eq!(iterations, 1);
                assert!(achieved.is_finite());
            }
            other => panic!("expected NonConvergence, got {other:?}"),
        }
    }

    #[test]
    fn assemble_rejects_bad_parameters() {
        assert!(matches!(
            StencilMatrix::assemble(grid4(), 0.0, 1.0),
            Err(DiffusionError::BadTimestep(_))
        ));
        assert!(matches!(
            StencilMatrix::assemble(grid4(), 1.0, -1.0),
            Err(DiffusionError::BadKappa(_))
        ));
    }
}
