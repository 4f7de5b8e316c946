//! Built-in analytic densities used by the experiments and the CLI presets.

use crate::grid::{DensityField, GridSpec, ScalarField};

/// Smooth periodic density with multiple peaks:
/// `10 + 9.99 sin(4 pi i / (L-1)) cos(2 pi j / (M-1)) cos(2 pi k / (N-1))`.
pub fn peaks(grid: GridSpec) -> DensityField {
    let (l, m, n) = grid.dims();
    let field = ScalarField::from_fn(grid, |i, j, k| {
        let a = 4.0 * std::f64::consts::PI * i as f64 / (l - 1) as f64;
        let b = 2.0 * std::f64::consts::PI * j as f64 / (m - 1) as f64;
        let c = 2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64;
        10.0 + 9.99 * a.sin() * b.cos() * c.cos()
    });
    DensityField::new(field).expect("peaks density is bounded below by 0.01")
}

/// Piecewise-constant density taking the eight odd values 1, 3, ..., 15 on
/// the eight octants of the grid, ordered by (i, j, k) half-space tests.
pub fn eight_region(grid: GridSpec) -> DensityField {
    let (l, m, n) = grid.dims();
    let field = ScalarField::from_fn(grid, |i, j, k| {
        let hi_i = i >= l / 2;
        let hi_j = j >= m / 2;
        let hi_k = k >= n / 2;
        let octant = (hi_i as usize) + 2 * (hi_j as usize) + 4 * (hi_k as usize);
        (2 * octant + 1) as f64
    });
    DensityField::new(field).expect("octant values are positive")
}

/// Constant density; equalization of it is the identity.
pub fn uniform(grid: GridSpec, value: f64) -> Result<DensityField, crate::grid::GridError> {
    DensityField::uniform(grid, value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaks_is_positive_and_bounded() {
        let g = GridSpec::new((16, 16, 16), 1.0).unwrap();
        let rho = peaks(g);
        for v in rho.values() {
            assert!(*v > 0.0 && *v < 20.0);
        }
    }

    #[test]
    fn eight_region_corner_values() {
        let g = GridSpec::new((32, 32, 32), 1.0).unwrap();
        let rho = eight_region(g);
        assert_eq!(rho.at(0, 0, 0), 1.0);
        assert_eq!(rho.at(31, 0, 0), 3.0);
        assert_eq!(rho.at(0, 31, 0), 5.0);
        assert_eq!(rho.at(31, 31, 0), 7.0);
        assert_eq!(rho.at(0, 0, 31), 9.0);
        assert_eq!(rho.at(31, 0, 31), 11.0);
        assert_eq!(rho.at(0, 31, 31), 13.0);
        assert_eq!(rho.at(31, 31, 31), 15.0);
        assert_eq!(rho.at(15, 15, 15), 1.0);
        assert_eq!(rho.at(16, 16, 16), 15.0);
    }
}
