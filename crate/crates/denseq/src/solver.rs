//! The equalization loop: timestep selection, the diffuse / velocity /
//! advect iteration, convergence testing, and boundary-condition setup
//! including the free-boundary sea embedding.

use crate::advection::{self, AdvectionError};
use crate::diffusion::{cg_solve, CgSettings, DiffusionError, StencilMatrix};
use crate::grid::{DensityField, GridError, GridSpec, ReferenceMap, ScalarField};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Advection(#[from] AdvectionError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("density lost positivity at iteration {iteration}: value {value} at node index {index}")]
    PositivityLost {
        iteration: usize,
        index: usize,
        value: f64,
    },
}

/// Boundary treatment per axis pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisMode {
    /// Zero normal density flux; the boundary planes stay planar.
    NoFlux,
    /// The domain is embedded in a padded "sea" so this boundary can deform.
    Free,
}

/// Which boundary condition governs each axis, plus the sea padding in
/// nodes per free side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundarySpec {
    pub x: AxisMode,
    pub y: AxisMode,
    pub z: AxisMode,
    pub padding: usize,
}

impl BoundarySpec {
    pub fn no_flux() -> Self {
        Self {
            x: AxisMode::NoFlux,
            y: AxisMode::NoFlux,
            z: AxisMode::NoFlux,
            padding: 0,
        }
    }

    pub fn free(padding: usize) -> Self {
        Self {
            x: AxisMode::Free,
            y: AxisMode::Free,
            z: AxisMode::Free,
            padding,
        }
    }

    pub fn modes(&self) -> [AxisMode; 3] {
        [self.x, self.y, self.z]
    }

    pub fn has_free_axis(&self) -> bool {
        self.modes().contains(&AxisMode::Free)
    }

    fn validate(&self) -> Result<(), SolveError> {
        if self.has_free_axis() && self.padding == 0 {
            return Err(SolveError::InvalidConfig(
                "boundary.padding must be at least 1 when any axis is free".into(),
            ));
        }
        Ok(())
    }
}

/// Where the original domain sits inside the padded solve domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Embedding {
    /// Node offset of the original domain's low corner per axis.
    pub offsets: (usize, usize, usize),
    /// Dimensions of the original domain.
    pub inner_dims: (usize, usize, usize),
}

/// Pads the density into a larger domain whose "sea" carries the mean of
/// the original density, so the original boundary can deform freely without
/// the domain expanding indefinitely.
pub fn embed_in_sea(
    rho: &DensityField,
    spec: &BoundarySpec,
) -> Result<(DensityField, Embedding), SolveError> {
    spec.validate()?;
    if !spec.has_free_axis() {
        return Err(SolveError::InvalidConfig(
            "embed_in_sea requires at least one free axis".into(),
        ));
    }
    let grid = rho.grid();
    let (l, m, n) = grid.dims();
    let pad = |mode: AxisMode| if mode == AxisMode::Free { spec.padding } else { 0 };
    let (px, py, pz) = (pad(spec.x), pad(spec.y), pad(spec.z));
    let outer = GridSpec::new((l + 2 * px, m + 2 * py, n + 2 * pz), grid.spacing())?;
    let sea = rho.mean();
    let inner = rho.values();
    let field = ScalarField::from_fn(outer, |i, j, k| {
        if (px..px + l).contains(&i) && (py..py + m).contains(&j) && (pz..pz + n).contains(&k) {
            inner[grid.index(i - px, j - py, k - pz)]
        } else {
            sea
        }
    });
    let embedding = Embedding {
        offsets: (px, py, pz),
        inner_dims: (l, m, n),
    };
    Ok((DensityField::new(field)?, embedding))
}

/// Everything the iteration loop is parameterized by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Convergence threshold on `||rho^n - rho^(n-1)||_2 / mean(rho^(n-1))`.
    pub epsilon: f64,
    pub n_max: usize,
    /// Diffusion coefficient in `A = I - dt * kappa * Lap`.
    pub kappa: f64,
    /// CG settings; `None` picks the per-grid defaults.
    pub cg: Option<CgSettings>,
    /// Capture the reference map every this many iterations (0 = none).
    pub snapshot_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-2,
            n_max: 10_000,
            kappa: 1.0,
            cg: None,
            snapshot_stride: 0,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolveError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SolveError::InvalidConfig(format!(
                "solver.epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.n_max == 0 {
            return Err(SolveError::InvalidConfig("solver.n_max must be at least 1".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(SolveError::InvalidConfig(format!(
                "solver.kappa must be positive, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

/// One line of the per-iteration log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// The convergence ratio `||rho^n - rho^(n-1)||_2 / mean(rho^(n-1))`.
    pub convergence_ratio: f64,
    /// `max(|v_x| + |v_y| + |v_z|)` of this iteration's velocity field.
    pub vmax: f64,
    pub cg_iterations: usize,
    /// Total density mass `sum(rho^n)` after the diffusion solve.
    pub mass: f64,
    /// Smallest per-node `xi^(n-1)` coefficient of the upwind update.
    pub min_coefficient: f64,
}

impl IterationRecord {
    /// The log-line form: `iter=<n> conv=<ratio> vmax=<v> cg_iters=<m>`.
    pub fn log_line(&self) -> String {
        format!(
            "iter={} conv={:.12e} vmax={:.12e} cg_iters={}",
            self.iteration, self.convergence_ratio, self.vmax, self.cg_iterations
        )
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// The equalizing reference map, on the padded domain for free runs.
    pub xi_final: ReferenceMap,
    pub rho_final: DensityField,
    pub iterations: usize,
    pub converged: bool,
    /// `(iteration, map)` pairs; entry 0 is the identity when captured.
    pub snapshots: Vec<(usize, ReferenceMap)>,
    pub embedding: Option<Embedding>,
    /// The fixed timestep, 0 when the input was already uniform.
    pub dt: f64,
    pub log: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

impl SolveResult {
    /// The grid the solve ran on (padded for free-boundary runs).
    pub fn grid(&self) -> GridSpec {
        self.xi_final.grid()
    }
}

/// `||rho_n - rho_prev||_2 / mean(rho_prev) <= epsilon`.
pub fn check_convergence(
    rho_n: &DensityField,
    rho_prev: &DensityField,
    epsilon: f64,
) -> Result<bool, GridError> {
    Ok(convergence_ratio(rho_n, rho_prev)? <= epsilon)
}

fn convergence_ratio(rho_n: &DensityField, rho_prev: &DensityField) -> Result<f64, GridError> {
    let dist = rho_n.as_scalar().l2_distance(rho_prev.as_scalar())?;
    Ok(dist / rho_prev.mean())
}

fn scale_velocity(v: &mut crate::grid::VectorField, kappa: f64) {
    if kappa != 1.0 {
        let (x, y, z) = v.components_mut();
        for field in [x, y, z] {
            for value in field.values_mut() {
                *value *= kappa;
            }
        }
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        })
}

/// Runs the full equalization: embed (if any axis is free), pick the
/// timestep from the initial velocity, then iterate diffuse / velocity /
/// advect until the convergence criterion or `n_max`.
///
/// A uniform input short-circuits to the identity map with zero iterations.
/// Hitting `n_max` without convergence is reported in the result, not an
/// error.
pub fn solve(
    rho0: &DensityField,
    spec: &BoundarySpec,
    config: &SolverConfig,
) -> Result<SolveResult, SolveError> {
    config.validate()?;
    spec.validate()?;

    let (rho_work, embedding) = if spec.has_free_axis() {
        let (rho, emb) = embed_in_sea(rho0, spec)?;
        (rho, Some(emb))
    } else {
        (rho0.clone(), None)
    };
    let grid = rho_work.grid();
    let stride = config.snapshot_stride;

    let v0 = advection::velocity(&rho_work);
    let dt = match advection::cfl_timestep(&v0, grid.spacing()) {
        Ok(dt) => dt,
        Err(AdvectionError::AlreadyEqualized) => {
            let xi = ReferenceMap::identity(grid);
            let snapshots = if stride > 0 { vec![(0, xi.clone())] } else { Vec::new() };
            return Ok(SolveResult {
                xi_final: xi,
                rho_final: rho_work,
                iterations: 0,
                converged: true,
                snapshots,
                embedding,
                dt: 0.0,
                log: Vec::new(),
                warnings: Vec::new(),
            });
        }
        Err(e) => return Err(e.into()),
    };
    // kappa rescales the diffusion rate and the advecting velocity
    // together: the map transport must match the density flux
    // (v = -kappa grad(rho) / rho when the matrix carries kappa) or the
    // map over- or under-shoots the equalized state by a factor of kappa.
    // The timestep keeps the unscaled-velocity CFL bound, which covers the
    // scaled velocity for kappa <= 1; above 1 it is shrunk to compensate.
    let dt = if config.kappa > 1.0 { dt / config.kappa } else { dt };
    let vmax0 = config.kappa * v0.max_component_sum();

    let matrix = StencilMatrix::assemble(grid, dt, config.kappa)?;
    let cg_settings = config.cg.unwrap_or_else(|| CgSettings::for_grid(grid));
    let extent = grid.extent();
    let max_extent = extent[0].max(extent[1]).max(extent[2]);

    let mut xi = ReferenceMap::identity(grid);
    let mut snapshots = Vec::new();
    if stride > 0 {
        snapshots.push((0, xi.clone()));
    }
    let mut rho_prev = rho_work;
    let mut log: Vec<IterationRecord> = Vec::new();
    let mut warnings = Vec::new();
    let mut warned_vmax = false;
    let mut warned_box = false;
    let mut warned_ratio = false;
    let mut warned_range = false;
    let mut iterations = 0;
    let mut converged = false;

    for n in 1..=config.n_max {
        iterations = n;
        let sol = cg_solve(&matrix, rho_prev.as_scalar(), &cg_settings, rho_prev.as_scalar())?;
        let rho_n = DensityField::new(sol.x).map_err(|e| match e {
            GridError::NonPositiveDensity { index, value } => SolveError::PositivityLost {
                iteration: n,
                index,
                value,
            },
            other => SolveError::Grid(other),
        })?;

        // Discrete maximum principle: the density range should contract.
        if !warned_range {
            let tol = 10.0 * cg_settings.rel_tolerance * rho_prev.l2_norm();
            let (lo_prev, hi_prev) = min_max(rho_prev.values());
            let (lo, hi) = min_max(rho_n.values());
            if lo < lo_prev - tol || hi > hi_prev + tol {
                warnings.push(format!(
                    "iteration {n}: density range [{lo:.6e}, {hi:.6e}] exceeded previous [{lo_prev:.6e}, {hi_prev:.6e}]"
                ));
                warned_range = true;
            }
        }

        let mut v = advection::velocity(&rho_n);
        scale_velocity(&mut v, config.kappa);
        let vmax = v.max_component_sum();
        if vmax > vmax0 && !warned_vmax {
            warnings.push(format!(
                "iteration {n}: max velocity sum {vmax:.6e} exceeds initial {vmax0:.6e}"
            ));
            warned_vmax = true;
        }
        let (min_coefficient, _) = advection::min_monotone_coefficient(&v, dt);
        xi = advection::upwind_step(&xi, &v, dt)?;
        if !warned_box {
            let excess = xi.box_excess();
            if excess > 1e-9 * max_extent {
                warnings.push(format!(
                    "iteration {n}: reference map left the coordinate box by {excess:.3e}"
                ));
                warned_box = true;
            }
        }

        let ratio = convergence_ratio(&rho_n, &rho_prev)?;
        if let Some(last) = log.last() {
            if ratio > last.convergence_ratio * 1.01 && !warned_ratio {
                warnings.push(format!(
                    "iteration {n}: convergence ratio rose from {:.6e} to {ratio:.6e}",
                    last.convergence_ratio
                ));
                warned_ratio = true;
            }
        }
        log.push(IterationRecord {
            iteration: n,
            convergence_ratio: ratio,
            vmax,
            cg_iterations: sol.iterations,
            mass: rho_n.sum(),
            min_coefficient,
        });
        if stride > 0 && n % stride == 0 {
            snapshots.push((n, xi.clone()));
        }

        rho_prev = rho_n;
        if ratio <= config.epsilon {
            converged = true;
            break;
        }
    }

    if stride > 0 && snapshots.last().map(|(n, _)| *n) != Some(iterations) {
        snapshots.push((iterations, xi.clone()));
    }

    Ok(SolveResult {
        xi_final: xi,
        rho_final: rho_prev,
        iterations,
        converged,
        snapshots,
        embedding,
        dt,
        log,
        warnings,
    })
}
