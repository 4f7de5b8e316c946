//! Volumetric density-equalizing reference maps.
//!
//! Given a positive density `rho0` on a 3D rectangular grid, the solver
//! iterates backward-Euler diffusion and second-order upwind advection of a
//! reference map until the density is (numerically) uniform. The converged
//! reference map `xi_final` sends each deformed grid position back to the
//! location it came from; inverting it per tetrahedral cell gives a forward
//! map that deforms anything embedded in the grid so that prescribed
//! density differences become size differences.
//!
//! ```
//! use denseq::grid::GridSpec;
//! use denseq::presets;
//! use denseq::solver::{solve, BoundarySpec, SolverConfig};
//!
//! let grid = GridSpec::new((8, 8, 8), 1.0).unwrap();
//! let rho = presets::peaks(grid);
//! let result = solve(&rho, &BoundarySpec::no_flux(), &SolverConfig::default()).unwrap();
//! assert!(result.converged);
//! ```
//!
//! The crate is organized bottom-up: [`grid`] holds field storage,
//! [`diffusion`] the backward-Euler step, [`advection`] the velocity and
//! upwind update, [`solver`] the iteration loop, [`forward_map`] the
//! piecewise-linear inverse and mismatch diagnostics, [`mesh`] the
//! deformation/morphing/remeshing applications, and [`io`] the on-disk
//! formats.

pub mod advection;
pub mod diffusion;
pub mod forward_map;
pub mod grid;
pub mod io;
pub mod mesh;
mod parallel;
pub mod presets;
pub mod solver;

pub use grid::{DensityField, GridSpec, ReferenceMap, ScalarField, VectorField};
pub use solver::{solve, BoundarySpec, SolveResult, SolverConfig};

/// The user guide, one module per chapter of the `book/` sources.
///
/// Including the chapters here keeps them honest: every code block in the
/// guide compiles and runs as a doc-test of this crate.
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/fields.md")]
    pub mod fields {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub mod diffusion {}
    #[doc = include_str!("../../../book/src/advection.md")]
    pub mod advection {}
    #[doc = include_str!("../../../book/src/solver.md")]
    pub mod solver {}
    #[doc = include_str!("../../../book/src/forward-map.md")]
    pub mod forward_map {}
    #[doc = include_str!("../../../book/src/applications.md")]
    pub mod applications {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
