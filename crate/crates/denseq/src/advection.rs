//! Velocity from the density gradient and the second-order upwind update of
//! the reference map.
//!
//! Index classes per axis, for an axis of size `s`:
//!   - `0` and `s-1`: boundary face. The normal velocity component is zero
//!     there (ghost density equals face density, so the central difference
//!     across the face vanishes), and no normal derivative is taken.
//!   - `1` and `s-2`: two-point one-sided differences.
//!   - `[2, s-3]`: three-point one-sided differences.

use crate::grid::{DensityField, ReferenceMap, ScalarField, VectorField};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdvectionError {
    #[error("reference map and velocity are defined on different grids")]
    MismatchedGrids,
    #[error("density is already uniform: the velocity field is zero everywhere")]
    AlreadyEqualized,
    #[error("timestep must be positive and finite, got {0}")]
    BadTimestep(f64),
    #[error(
        "monotone bound violated at node ({i}, {j}, {k}): xi coefficient {coefficient:e} outside [0, 1]"
    )]
    MonotoneBoundViolated {
        i: usize,
        j: usize,
        k: usize,
        coefficient: f64,
    },
}

/// `v = -grad(rho) / rho` by central differences.
///
/// Boundary-normal components are zero on the corresponding faces;
/// tangential components use the same central formula everywhere.
pub fn velocity(rho: &DensityField) -> VectorField {
    let grid = rho.grid();
    let (l, m, n) = grid.dims();
    let lm = l * m;
    let two_h = 2.0 * grid.spacing();
    let vals = rho.values();

    let component = |axis: usize| -> ScalarField {
        let (stride, size) = match axis {
            0 => (1usize, l),
            1 => (l, m),
            _ => (lm, n),
        };
        let mut out = vec![0.0f64; vals.len()];
        out.par_chunks_mut(lm).enumerate().for_each(|(k, slab)| {
            for j in 0..m {
                for i in 0..l {
                    let idx = i + l * (j + m * k);
                    let pos = [i, j, k][axis];
                    slab[i + l * j] = if pos == 0 || pos == size - 1 {
                        0.0
                    } else {
                        -(vals[idx + stride] - vals[idx - stride]) / (two_h * vals[idx])
                    };
                }
            }
        });
        ScalarField::from_values(grid, out).expect("velocity is finite for positive density")
    };

    VectorField::new(component(0), component(1), component(2)).expect("components share the grid")
}

/// The timestep upper bound `2h / (3 max(|v_x| + |v_y| + |v_z|))` evaluated
/// on the initial velocity field.
pub fn cfl_timestep(v0: &VectorField, h: f64) -> Result<f64, AdvectionError> {
    let vmax = v0.max_component_sum();
    if vmax == 0.0 {
        return Err(AdvectionError::AlreadyEqualized);
    }
    Ok(2.0 * h / (3.0 * vmax))
}

/// Weight of `|v|` in the node's `xi^(n-1)` coefficient for one axis
/// position: `3/(2h)` at three-point nodes, `1/h` at the two-point fallback
/// nodes, `0` on the face (zero normal velocity).
#[inline]
fn coefficient_factor(pos: usize, size: usize, h: f64) -> f64 {
    if pos == 0 || pos == size - 1 {
        0.0
    } else if pos == 1 || pos == size - 2 {
        1.0 / h
    } else {
        1.5 / h
    }
}

/// Smallest `xi^(n-1)` self-coefficient `1 - dt (3|v_x|/2h + ...)` over all
/// nodes, with the node where it is attained.
///
/// Under the CFL bound this coefficient lies in `[0, 1]` everywhere; the
/// solve loop treats a negative value as a hard error.
pub fn min_monotone_coefficient(v: &VectorField, dt: f64) -> (f64, (usize, usize, usize)) {
    let grid = v.grid();
    let (l, m, n) = grid.dims();
    let h = grid.spacing();
    let (xs, ys, zs) = (v.x().values(), v.y().values(), v.z().values());
    let mut best = f64::INFINITY;
    let mut at = (0, 0, 0);
    for k in 0..n {
        for j in 0..m {
            for i in 0..l {
                let idx = grid.index(i, j, k);
                let c = 1.0
                    - dt * (coefficient_factor(i, l, h) * xs[idx].abs()
                        + coefficient_factor(j, m, h) * ys[idx].abs()
                        + coefficient_factor(k, n, h) * zs[idx].abs());
                if c < best {
                    best = c;
                    at = (i, j, k);
                }
            }
        }
    }
    (best, at)
}

const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Clone, Copy)]
struct AxisView {
    stride: usize,
    size: usize,
}

/// One-sided derivative of `field` along an axis at linear index `idx`,
/// selected by the sign of `vel` (`d-` for positive, `d+` otherwise).
#[inline]
fn upwind_derivative(field: &[f64], idx: usize, pos: usize, axis: AxisView, h: f64, vel: f64) -> f64 {
    let AxisView { stride, size } = axis;
    if pos == 0 || pos == size - 1 {
        return 0.0;
    }
    let two_point = pos == 1 || pos == size - 2;
    if vel > 0.0 {
        if two_point {
            (field[idx] - field[idx - stride]) / h
        } else {
            (3.0 * field[idx] - 4.0 * field[idx - stride] + field[idx - 2 * stride]) / (2.0 * h)
        }
    } else if two_point {
        (field[idx + stride] - field[idx]) / h
    } else {
        (-field[idx + 2 * stride] + 4.0 * field[idx + stride] - 3.0 * field[idx]) / (2.0 * h)
    }
}

/// Advances the reference map one step:
/// `xi^n = xi^(n-1) - dt (v_x d_x + v_y d_y + v_z d_z)`, where each `d_a` is
/// the one-sided derivative `d_a^-` when `v_a > 0` and `d_a^+` otherwise.
/// This is upwind for the advection equation `dxi/dt + v . grad(xi) = 0` and
/// gives the node's own previous value the coefficient
/// `1 - dt (3|v_x|/2h + 3|v_y|/2h + 3|v_z|/2h)` at three-point nodes.
///
/// The per-node monotone-bound check runs first; a violated bound (timestep
/// above the CFL limit for this velocity field) is an error.
pub fn upwind_step(
    xi: &ReferenceMap,
    v: &VectorField,
    dt: f64,
) -> Result<ReferenceMap, AdvectionError> {
    let grid = xi.grid();
    if v.grid() != grid {
        return Err(AdvectionError::MismatchedGrids);
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(AdvectionError::BadTimestep(dt));
    }
    let (coeff, (ci, cj, ck)) = min_monotone_coefficient(v, dt);
    if coeff < -MONOTONE_SLACK {
        return Err(AdvectionError::MonotoneBoundViolated {
            i: ci,
            j: cj,
            k: ck,
            coefficient: coeff,
        });
    }

    let (l, m, n) = grid.dims();
    let lm = l * m;
    let h = grid.spacing();
    let axes = [
        AxisView { stride: 1, size: l },
        AxisView { stride: l, size: m },
        AxisView { stride: lm, size: n },
    ];
    let vel = [v.x().values(), v.y().values(), v.z().values()];

    let advect = |comp: &ScalarField| -> ScalarField {
        let prev = comp.values();
        let mut out = vec![0.0f64; prev.len()];
        out.par_chunks_mut(lm).enumerate().for_each(|(k, slab)| {
            for j in 0..m {
                for i in 0..l {
                    let idx = i + l * (j + m * k);
                    let pos = [i, j, k];
                    let mut rate = 0.0;
                    for axis in 0..3 {
                        let va = vel[axis][idx];
                        if va != 0.0 {
                            rate += va
                                * upwind_derivative(prev, idx, pos[axis], axes[axis], h, va);
                        }
                    }
                    slab[i + l * j] = prev[idx] - dt * rate;
                }
            }
        });
        ScalarField::from_values(grid, out).expect("advection output is finite")
    };

    let components = VectorField::new(advect(xi.x()), advect(xi.y()), advect(xi.z()))
        .expect("components share the grid");
    Ok(ReferenceMap::from_components(components))
}
