//! Dense storage for scalar and vector fields on a structured 3D grid.
//!
//! Every field in the crate lives on a node-centered `L x M x N` grid with
//! uniform spacing `h`; node `(i, j, k)` sits at `(ih, jh, kh)`. Values are
//! stored in one linear order everywhere: the x-index runs fastest, then y,
//! then z, so the `+/-i` stencil neighbors are contiguous in memory.

use crate::parallel;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid dimensions must be at least 4 per axis, got {0}x{1}x{2}")]
    TooSmall(usize, usize, usize),
    #[error("grid spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("node count {0}x{1}x{2} overflows the address space")]
    Overflow(usize, usize, usize),
    #[error("value count {got} does not match node count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("non-finite value at node index {0}")]
    NonFinite(usize),
    #[error("non-positive density {value} at node index {index}")]
    NonPositiveDensity { index: usize, value: f64 },
    #[error("fields are defined on different grids")]
    MismatchedGrids,
}

/// A node-centered structured grid: dimensions `(L, M, N)` and spacing `h`.
///
/// The second-order upwind stencil needs two interior neighbors per side, so
/// every axis must have at least 4 nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    dims: (usize, usize, usize),
    spacing: f64,
}

impl GridSpec {
    pub fn new(dims: (usize, usize, usize), spacing: f64) -> Result<Self, GridError> {
        let (l, m, n) = dims;
        if l < 4 || m < 4 || n < 4 {
            return Err(GridError::TooSmall(l, m, n));
        }
        if !(spacing.is_finite() && spacing > 0.0) {
            return Err(GridError::BadSpacing(spacing));
        }
        l.checked_mul(m)
            .and_then(|lm| lm.checked_mul(n))
            .ok_or(GridError::Overflow(l, m, n))?;
        Ok(Self { dims, spacing })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn node_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    /// Linear index of node `(i, j, k)`; x runs fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims.0 && j < self.dims.1 && k < self.dims.2);
        i + self.dims.0 * (j + self.dims.1 * k)
    }

    /// Inverse of [`GridSpec::index`].
    #[inline]
    pub fn node(&self, index: usize) -> (usize, usize, usize) {
        let (l, m, _) = self.dims;
        let i = index % l;
        let j = (index / l) % m;
        let k = index / (l * m);
        (i, j, k)
    }

    /// Physical coordinates `(ih, jh, kh)` of node `(i, j, k)`.
    #[inline]
    pub fn coords(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            i as f64 * self.spacing,
            j as f64 * self.spacing,
            k as f64 * self.spacing,
        ]
    }

    /// Extent `((L-1)h, (M-1)h, (N-1)h)` of the node bounding box.
    pub fn extent(&self) -> [f64; 3] {
        let (l, m, n) = self.dims;
        [
            (l - 1) as f64 * self.spacing,
            (m - 1) as f64 * self.spacing,
            (n - 1) as f64 * self.spacing,
        ]
    }
}

/// Which reduction [`ScalarField::reduce`] performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    MaxAbs,
    L2Norm,
}

/// A real value per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    /// A field with every node set to `fill`.
    pub fn new(grid: GridSpec, fill: f64) -> Self {
        Self {
            grid,
            values: vec![fill; grid.node_count()],
        }
    }

    /// Takes ownership of `values`; rejects length mismatches and non-finite
    /// entries.
    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.node_count() {
            return Err(GridError::LengthMismatch {
                got: values.len(),
                expected: grid.node_count(),
            });
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(bad));
        }
        Ok(Self { grid, values })
    }

    /// Evaluates `f(i, j, k)` at every node.
    pub fn from_fn(grid: GridSpec, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let (l, m, n) = grid.dims();
        let mut values = Vec::with_capacity(grid.node_count());
        for k in 0..n {
            for j in 0..m {
                for i in 0..l {
                    values.push(f(i, j, k));
                }
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.grid.index(i, j, k)]
    }

    pub fn reduce(&self, kind: Reduction) -> f64 {
        match kind {
            Reduction::Sum => parallel::sum(&self.values),
            Reduction::Mean => parallel::sum(&self.values) / self.grid.node_count() as f64,
            Reduction::MaxAbs => parallel::max_abs(&self.values),
            Reduction::L2Norm => parallel::dot(&self.values, &self.values).sqrt(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.reduce(Reduction::Sum)
    }

    pub fn mean(&self) -> f64 {
        self.reduce(Reduction::Mean)
    }

    pub fn max_abs(&self) -> f64 {
        self.reduce(Reduction::MaxAbs)
    }

    pub fn l2_norm(&self) -> f64 {
        self.reduce(Reduction::L2Norm)
    }

    /// Trilinear interpolation at a point in grid coordinates.
    ///
    /// Returns `None` when the point lies outside the node bounding box by
    /// more than `1e-9 h` per axis; smaller excursions are clamped.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> Option<f64> {
        let extent = self.grid.extent();
        let tol = 1e-9 * self.grid.spacing();
        for axis in 0..3 {
            if p[axis] < -tol || p[axis] > extent[axis] + tol {
                return None;
            }
        }
        Some(self.sample_trilinear_clamped(p))
    }

    /// Trilinear interpolation with the point clamped into the node box.
    pub fn sample_trilinear_clamped(&self, p: [f64; 3]) -> f64 {
        let (l, m, n) = self.grid.dims();
        let h = self.grid.spacing();
        let extent = self.grid.extent();
        let mut cell = [0usize; 3];
        let mut frac = [0f64; 3];
        for (axis, size) in [(0, l), (1, m), (2, n)] {
            let x = (p[axis].clamp(0.0, extent[axis])) / h;
            let c = (x.floor() as usize).min(size - 2);
            cell[axis] = c;
            frac[axis] = (x - c as f64).clamp(0.0, 1.0);
        }
        let [ci, cj, ck] = cell;
        let [fx, fy, fz] = frac;
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 0 { 1.0 - fx } else { fx })
                        * (if dy == 0 { 1.0 - fy } else { fy })
                        * (if dz == 0 { 1.0 - fz } else { fz });
                    acc += w * self.at(ci + dx, cj + dy, ck + dz);
                }
            }
        }
        acc
    }

    /// `||self - other||_2`.
    pub fn l2_distance(&self, other: &ScalarField) -> Result<f64, GridError> {
        if self.grid != other.grid {
            return Err(GridError::MismatchedGrids);
        }
        let mut acc = 0.0;
        let mut partial = Vec::new();
        const CHUNK: usize = 8192;
        for (ca, cb) in self.values.chunks(CHUNK).zip(other.values.chunks(CHUNK)) {
            let mut s = 0.0;
            for (a, b) in ca.iter().zip(cb) {
                let d = a - b;
                s += d * d;
            }
            partial.push(s);
        }
        for s in partial {
            acc += s;
        }
        Ok(acc.sqrt())
    }
}

/// A strictly positive [`ScalarField`]; the quantity being diffused.
///
/// Positivity is required because the velocity field divides by the density.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField(ScalarField);

impl DensityField {
    pub fn new(field: ScalarField) -> Result<Self, GridError> {
        if let Some(bad) = field.values().iter().position(|v| !(*v > 0.0)) {
            return Err(GridError::NonPositiveDensity {
                index: bad,
                value: field.values()[bad],
            });
        }
        Ok(Self(field))
    }

    pub fn uniform(grid: GridSpec, value: f64) -> Result<Self, GridError> {
        Self::new(ScalarField::new(grid, value))
    }

    pub fn as_scalar(&self) -> &ScalarField {
        &self.0
    }

    pub fn into_scalar(self) -> ScalarField {
        self.0
    }
}

impl std::ops::Deref for DensityField {
    type Target = ScalarField;

    fn deref(&self) -> &ScalarField {
        &self.0
    }
}

/// Three scalar components on one shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    x: ScalarField,
    y: ScalarField,
    z: ScalarField,
}

impl VectorField {
    pub fn new(x: ScalarField, y: ScalarField, z: ScalarField) -> Result<Self, GridError> {
        if x.grid() != y.grid() || x.grid() != z.grid() {
            return Err(GridError::MismatchedGrids);
        }
        Ok(Self { x, y, z })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            x: ScalarField::new(grid, 0.0),
            y: ScalarField::new(grid, 0.0),
            z: ScalarField::new(grid, 0.0),
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.x.grid()
    }

    pub fn x(&self) -> &ScalarField {
        &self.x
    }

    pub fn y(&self) -> &ScalarField {
        &self.y
    }

    pub fn z(&self) -> &ScalarField {
        &self.z
    }

    pub fn component(&self, axis: usize) -> &ScalarField {
        match axis {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("axis out of range"),
        }
    }

    pub fn components_mut(&mut self) -> (&mut ScalarField, &mut ScalarField, &mut ScalarField) {
        (&mut self.x, &mut self.y, &mut self.z)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [self.x.at(i, j, k), self.y.at(i, j, k), self.z.at(i, j, k)]
    }

    /// Max over nodes of `|v_x| + |v_y| + |v_z|`.
    pub fn max_component_sum(&self) -> f64 {
        let (xs, ys, zs) = (self.x.values(), self.y.values(), self.z.values());
        let mut m = 0.0f64;
        for idx in 0..xs.len() {
            m = m.max(xs[idx].abs() + ys[idx].abs() + zs[idx].abs());
        }
        m
    }
}

/// The reference location of material at each grid node.
///
/// At construction the map is the identity: node `(i, j, k)` holds exactly
/// `(ih, jh, kh)`. Advection with a monotone scheme keeps each component
/// inside the initial coordinate box; [`ReferenceMap::box_excess`] measures
/// any excursion so the solve loop can check it per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceMap(VectorField);

impl ReferenceMap {
    /// The identity map `xi(x) = x`.
    pub fn identity(grid: GridSpec) -> Self {
        let xi1 = ScalarField::from_fn(grid, |i, _, _| i as f64 * grid.spacing());
        let xi2 = ScalarField::from_fn(grid, |_, j, _| j as f64 * grid.spacing());
        let xi3 = ScalarField::from_fn(grid, |_, _, k| k as f64 * grid.spacing());
        Self(VectorField {
            x: xi1,
            y: xi2,
            z: xi3,
        })
    }

    /// Wraps arbitrary component fields, e.g. when loading a stored map.
    pub fn from_components(components: VectorField) -> Self {
        Self(components)
    }

    pub fn as_vector(&self) -> &VectorField {
        &self.0
    }

    pub fn into_vector(self) -> VectorField {
        self.0
    }

    /// Largest distance by which any component value exits the grid
    /// coordinate box `[0, (L-1)h] x [0, (M-1)h] x [0, (N-1)h]`.
    pub fn box_excess(&self) -> f64 {
        let extent = self.0.grid().extent();
        let mut excess = 0.0f64;
        for (axis, field) in [&self.0.x, &self.0.y, &self.0.z].into_iter().enumerate() {
            for v in field.values() {
                excess = excess.max(-v).max(v - extent[axis]);
            }
        }
        excess.max(0.0)
    }
}

impl std::ops::Deref for ReferenceMap {
    type Target = VectorField;

    fn deref(&self) -> &VectorField {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(l: usize, m: usize, n: usize) -> GridSpec {
        GridSpec::new((l, m, n), 1.0).unwrap()
    }

    #[test]
    fn new_field_constant_fill() {
        let f = ScalarField::new(grid(4, 4, 4), 1.0);
        assert_eq!(f.values().len(), 64);
        assert!(f.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn new_field_zero_sum() {
        let f = ScalarField::new(grid(4, 4, 4), 0.0);
        assert_eq!(f.sum(), 0.0);
    }

    #[test]
    fn new_field_sum_arithmetic() {
        let f = ScalarField::new(grid(8, 16, 32), 2.0);
        assert_eq!(f.sum(), 8192.0);
    }

    #[test]
    fn grid_rejects_small_dims_and_bad_spacing() {
        assert_eq!(GridSpec::new((3, 4, 4), 1.0), Err(GridError::TooSmall(3, 4, 4)));
        assert_eq!(GridSpec::new((4, 4, 4), 0.0), Err(GridError::BadSpacing(0.0)));
        assert!(matches!(
            GridSpec::new((usize::MAX / 2, 4, 4), 1.0),
            Err(GridError::Overflow(..))
        ));
    }

    #[test]
    fn identity_map_examples() {
        let xi = ReferenceMap::identity(grid(8, 8, 8));
        assert_eq!(xi.at(3, 5, 7), [3.0, 5.0, 7.0]);
        assert_eq!(xi.at(0, 0, 0), [0.0, 0.0, 0.0]);

        let g = GridSpec::new((4, 4, 4), 0.5).unwrap();
        let xi = ReferenceMap::identity(g);
        assert_eq!(xi.at(2, 0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn identity_map_is_bitwise_node_coords() {
        let g = GridSpec::new((5, 6, 7), 0.25).unwrap();
        let xi = ReferenceMap::identity(g);
        for k in 0..7 {
            for j in 0..6 {
                for i in 0..5 {
                    assert_eq!(xi.at(i, j, k), g.coords(i, j, k));
                }
            }
        }
    }

    #[test]
    fn reduce_examples() {
        let f = ScalarField::new(grid(4, 4, 4), 1.0);
        assert_eq!(f.reduce(Reduction::Mean), 1.0);

        let mut f = ScalarField::new(grid(4, 4, 4), 0.0);
        f.values_mut()[5] = 3.0;
        f.values_mut()[40] = 4.0;
        assert_eq!(f.reduce(Reduction::L2Norm), 5.0);
    }

    #[test]
    fn reduce_mean_matches_direct_summation_on_peaks() {
        let g = grid(32, 32, 32);
        let f = crate::presets::peaks(g);
        // Independent oracle: plain sequential accumulation in node order.
        let mut total = 0.0f64;
        for v in f.values() {
            total += v;
        }
        let oracle = total / 32768.0;
        assert!((f.mean() - oracle).abs() <= 1e-12 * oracle.abs());
    }

    #[test]
    fn index_round_trip_all_nodes() {
        let g = grid(5, 7, 9);
        for idx in 0..g.node_count() {
            let (i, j, k) = g.node(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    #[test]
    fn density_rejects_non_positive() {
        let mut f = ScalarField::new(grid(4, 4, 4), 1.0);
        f.values_mut()[10] = 0.0;
        assert_eq!(
            DensityField::new(f),
            Err(GridError::NonPositiveDensity {
                index: 10,
                value: 0.0
            })
        );
    }

    #[test]
    fn box_excess_zero_for_identity() {
        assert_eq!(ReferenceMap::identity(grid(6, 6, 6)).box_excess(), 0.0);
    }

    proptest! {
        #[test]
        fn sum_is_permutation_invariant(mut values in proptest::collection::vec(-10.0f64..10.0, 64)) {
            let g = grid(4, 4, 4);
            let a = ScalarField::from_values(g, values.clone()).unwrap().sum();
            values.reverse();
            values.rotate_left(13);
            let b = ScalarField::from_values(g, values).unwrap().sum();
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
