//! Subcommand implementations. Each returns the process exit code through
//! `AppError`: input problems (config, files, meshes) are distinct from
//! solver failures, and a clean run that merely failed to converge is its
//! own outcome.

use crate::config::{DensitySource, RunConfig};
use denseq::advection::AdvectionError;
use denseq::diffusion::DiffusionError;
use denseq::forward_map::mismatch_error;
use denseq::grid::{DensityField, ScalarField, VectorField};
use denseq::io;
use denseq::mesh::{self, FitTransform, SurfaceMesh};
use denseq::presets;
use denseq::solver::{embed_in_sea, solve, SolveError, SolveResult};
use std::path::Path;
use thiserror::Error;

pub const EXIT_NOT_CONVERGED: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Solver(String),
    #[error("solve stopped without converging after {iterations} iterations (ratio {ratio:e})")]
    NotConverged { iterations: usize, ratio: f64 },
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Input(_) => EXIT_INPUT,
            AppError::Solver(_) => EXIT_SOLVER,
            AppError::NotConverged { .. } => EXIT_NOT_CONVERGED,
        }
    }
}

impl From<crate::config::ConfigError> for AppError {
    fn from(e: crate::config::ConfigError) -> Self {
        AppError::Input(e.to_string())
    }
}

fn solve_err(e: SolveError) -> AppError {
    match &e {
        SolveError::InvalidConfig(_) | SolveError::Grid(_) => AppError::Input(e.to_string()),
        SolveError::Diffusion(DiffusionError::NonConvergence { .. })
        | SolveError::Diffusion(_)
        | SolveError::Advection(AdvectionError::MonotoneBoundViolated { .. })
        | SolveError::Advection(_)
        | SolveError::PositivityLost { .. } => AppError::Solver(e.to_string()),
    }
}

fn out_err(e: io::IoError) -> AppError {
    AppError::Solver(format!("cannot write artifact: {e}"))
}

fn in_err(e: io::IoError) -> AppError {
    AppError::Input(e.to_string())
}

/// Builds the initial density named by the config, on the config grid.
pub fn build_density(config: &RunConfig) -> Result<DensityField, AppError> {
    match &config.density {
        DensitySource::Peaks => Ok(presets::peaks(config.grid)),
        DensitySource::EightRegion => Ok(presets::eight_region(config.grid)),
        DensitySource::Uniform(v) => presets::uniform(config.grid, *v)
            .map_err(|e| AppError::Input(format!("density.uniform_value: {e}"))),
        DensitySource::Regions(path) => {
            let spec = crate::config::load_region_spec(path)?;
            let out = mesh::rasterize_density(&spec, config.grid)
                .map_err(|e| AppError::Input(format!("density.regions: {e}")))?;
            for r in &out.empty_regions {
                eprintln!(
                    "warning: region {r} of {} matches no grid nodes",
                    path.display()
                );
            }
            Ok(out.density)
        }
        DensitySource::Field(path) => {
            let rho = io::read_density_field(path).map_err(in_err)?;
            if rho.grid() != config.grid {
                return Err(AppError::Input(format!(
                    "density.field: grid of {} does not match grid.dims/grid.spacing",
                    path.display()
                )));
            }
            Ok(rho)
        }
    }
}

/// Everything the apply-subcommands need from a finished solve.
pub struct SolveArtifacts {
    pub result: SolveResult,
    /// The prescribed density on the solve grid (embedded for free runs).
    pub rho0: DensityField,
}

/// Runs the solve described by the config. `table1_mode` overrides kappa
/// with `L/64`.
pub fn execute_solve(config: &RunConfig, table1_mode: bool) -> Result<SolveArtifacts, AppError> {
    let rho = build_density(config)?;
    let mut solver = config.solver;
    if table1_mode {
        solver.kappa = config.grid.dims().0 as f64 / 64.0;
    }
    let rho0 = if config.boundary.has_free_axis() {
        embed_in_sea(&rho, &config.boundary).map_err(solve_err)?.0
    } else {
        rho.clone()
    };
    let result = solve(&rho, &config.boundary, &solver).map_err(solve_err)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    Ok(SolveArtifacts { result, rho0 })
}

/// Writes the solve artifacts into `out` and prints the iteration log.
/// Returns `NotConverged` (after writing everything) when the iteration
/// budget ran out.
pub fn run_solve(config: &RunConfig, out: &Path, table1_mode: bool) -> Result<(), AppError> {
    let artifacts = execute_solve(config, table1_mode)?;
    write_solve_artifacts(config, &artifacts, out)?;
    let result = &artifacts.result;
    // Tolerate a closed pipe (e.g. `denseq solve ... | head`).
    let stdout = std::io::stdout();
    let mut stream = stdout.lock();
    for record in &result.log {
        use std::io::Write;
        if writeln!(stream, "{}", record.log_line()).is_err() {
            break;
        }
    }
    drop(stream);
    if !result.converged {
        return Err(AppError::NotConverged {
            iterations: result.iterations,
            ratio: result
                .log
                .last()
                .map(|r| r.convergence_ratio)
                .unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

fn write_solve_artifacts(
    config: &RunConfig,
    artifacts: &SolveArtifacts,
    out: &Path,
) -> Result<(), AppError> {
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::Input(format!("cannot create {}: {e}", out.display())))?;
    let result = &artifacts.result;

    if config.output.fields {
        io::write_reference_map(&out.join("xi_final.field"), &result.xi_final).map_err(out_err)?;
        io::write_density_field(&out.join("rho_final.field"), &result.rho_final)
            .map_err(out_err)?;
        io::write_density_field(&out.join("rho0.field"), &artifacts.rho0).map_err(out_err)?;
    }
    if let Some(emb) = &result.embedding {
        std::fs::write(out.join("embedding.txt"), io::render_embedding(emb))
            .map_err(|e| AppError::Solver(format!("cannot write embedding.txt: {e}")))?;
    }
    if config.output.log {
        let mut text = String::new();
        for record in &result.log {
            text.push_str(&record.log_line());
            text.push('\n');
        }
        std::fs::write(out.join("log.txt"), text)
            .map_err(|e| AppError::Solver(format!("cannot write log.txt: {e}")))?;
    }
    if config.output.snapshots && !result.snapshots.is_empty() {
        let dir = out.join("snapshots");
        std::fs::create_dir_all(&dir)
            .map_err(|e| AppError::Solver(format!("cannot create snapshots dir: {e}")))?;
        for (iteration, xi) in &result.snapshots {
            io::write_reference_map(&dir.join(format!("snap_{iteration:06}.field")), xi)
                .map_err(out_err)?;
        }
    }

    let report = mismatch_error(&result.xi_final, &artifacts.rho0, result.embedding.as_ref())
        .map_err(|e| AppError::Solver(format!("mismatch report failed: {e}")))?;
    std::fs::write(
        out.join("report.txt"),
        io::render_report(result.embedding, &report),
    )
    .map_err(|e| AppError::Solver(format!("cannot write report.txt: {e}")))?;
    let summary = format!(
        "iterations = {}\nconverged = {}\ndt = {:.17e}\nmean_abs_e = {:.17e}\n",
        result.iterations, result.converged, result.dt, report.mean_abs_e
    );
    std::fs::write(out.join("summary.txt"), summary)
        .map_err(|e| AppError::Solver(format!("cannot write summary.txt: {e}")))?;

    if config.output.vtk {
        write_deformed_grid(result, &report.e, &out.join("deformed.vtk"))?;
    }
    Ok(())
}

/// Structured-grid export for contour-plane visualization: each reference
/// node is placed at its deformed position (forward map of its original
/// coordinates) and carries the mismatch error as point data.
fn write_deformed_grid(
    result: &SolveResult,
    e: &ScalarField,
    path: &Path,
) -> Result<(), AppError> {
    let fm = denseq::forward_map::build_forward_map(&result.xi_final)
        .map_err(|err| AppError::Solver(format!("forward map failed: {err}")))?;
    let grid = e.grid();
    let (l, m, n) = grid.dims();
    let (off, h) = match &result.embedding {
        Some(emb) => (
            [emb.offsets.0, emb.offsets.1, emb.offsets.2],
            grid.spacing(),
        ),
        None => ([0, 0, 0], grid.spacing()),
    };
    let mut comps = [
        ScalarField::new(grid, 0.0),
        ScalarField::new(grid, 0.0),
        ScalarField::new(grid, 0.0),
    ];
    for k in 0..n {
        for j in 0..m {
            for i in 0..l {
                let reference = [
                    (i + off[0]) as f64 * h,
                    (j + off[1]) as f64 * h,
                    (k + off[2]) as f64 * h,
                ];
                // Boundary reference nodes can graze the hull; fall back to
                // the undeformed position there.
                let p = fm.query(reference).unwrap_or(reference);
                let idx = grid.index(i, j, k);
                for axis in 0..3 {
                    comps[axis].values_mut()[idx] = p[axis] - (off[axis] as f64) * h;
                }
            }
        }
    }
    let [x, y, z] = comps;
    let points = VectorField::new(x, y, z)
        .map_err(|err| AppError::Solver(format!("deformed grid assembly failed: {err}")))?;
    io::write_structured_grid(path, grid, Some(&points), &[("mismatch_e", e)])
        .map_err(out_err)
}

/// Regenerates the mismatch report from stored artifacts. When the two
/// grids differ in no recoverable way the embedding record next to the xi
/// file bridges them; stored `rho0.field` is always on the solve grid, so
/// normally the grids simply match.
pub fn run_report(xi_path: &Path, rho0_path: &Path, out: &Path) -> Result<(), AppError> {
    let xi = io::read_reference_map(xi_path).map_err(in_err)?;
    let rho0 = io::read_density_field(rho0_path).map_err(in_err)?;
    if rho0.grid() != xi.grid() {
        return Err(AppError::Input(format!(
            "grid mismatch: {} and {} are on different grids",
            xi_path.display(),
            rho0_path.display()
        )));
    }
    let embedding_path = xi_path.with_file_name("embedding.txt");
    let embedding = if embedding_path.exists() {
        Some(io::read_embedding(&embedding_path).map_err(in_err)?)
    } else {
        None
    };
    let report = mismatch_error(&xi, &rho0, embedding.as_ref())
        .map_err(|e| AppError::Solver(format!("mismatch report failed: {e}")))?;
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::Input(format!("cannot create {}: {e}", out.display())))?;
    std::fs::write(out.join("report.txt"), io::render_report(embedding, &report))
        .map_err(|e| AppError::Solver(format!("cannot write report.txt: {e}")))?;
    Ok(())
}

fn load_and_fit_mesh(
    config: &RunConfig,
    mesh_path: &Path,
) -> Result<(SurfaceMesh, Option<FitTransform>), AppError> {
    let raw = io::read_mesh(mesh_path).map_err(in_err)?;
    if config.mesh.fit {
        let (fitted, transform) = mesh::fit_to_grid(&raw, config.grid, config.mesh.margin);
        Ok((fitted, Some(transform)))
    } else {
        Ok((raw, None))
    }
}

fn unfit(m: &SurfaceMesh, transform: Option<FitTransform>) -> SurfaceMesh {
    match transform {
        Some(t) => {
            let vertices = m.vertices().iter().map(|v| t.invert(*v)).collect();
            SurfaceMesh::new(vertices, m.triangles().to_vec())
                .unwrap_or_else(|_| m.clone())
        }
        None => m.clone(),
    }
}

pub fn run_deform(
    config: &RunConfig,
    mesh_path: &Path,
    out: &Path,
    table1_mode: bool,
) -> Result<(), AppError> {
    let (fitted, transform) = load_and_fit_mesh(config, mesh_path)?;
    let artifacts = execute_solve(config, table1_mode)?;
    let deformed = mesh::deform_through(&artifacts.result, &fitted)
        .map_err(|e| AppError::Solver(format!("deformation failed: {e}")))?;
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::Input(format!("cannot create {}: {e}", out.display())))?;
    io::write_mesh(&out.join("deformed.obj"), &unfit(&deformed, transform)).map_err(out_err)?;
    write_solve_artifacts(config, &artifacts, out)?;
    if !artifacts.result.converged {
        return Err(AppError::NotConverged {
            iterations: artifacts.result.iterations,
            ratio: f64::NAN,
        });
    }
    Ok(())
}

pub fn run_morph(
    config: &RunConfig,
    mesh_path: &Path,
    out: &Path,
    table1_mode: bool,
) -> Result<(), AppError> {
    if config.solver.snapshot_stride == 0 {
        return Err(AppError::Input(
            "solver.snapshot_stride must be positive for morph".into(),
        ));
    }
    let (fitted, transform) = load_and_fit_mesh(config, mesh_path)?;
    let artifacts = execute_solve(config, table1_mode)?;
    let frames = mesh::morph_frames(&fitted, &artifacts.result)
        .map_err(|e| AppError::Solver(format!("morph failed: {e}")))?;
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::Input(format!("cannot create {}: {e}", out.display())))?;
    for (index, (_, frame)) in frames.frames.iter().enumerate() {
        io::write_mesh(
            &out.join(format!("frame_{index:04}.obj")),
            &unfit(frame, transform),
        )
        .map_err(out_err)?;
    }
    write_solve_artifacts(config, &artifacts, out)?;
    if !artifacts.result.converged {
        return Err(AppError::NotConverged {
            iterations: artifacts.result.iterations,
            ratio: f64::NAN,
        });
    }
    Ok(())
}

pub fn run_remesh_map(
    config: &RunConfig,
    points_path: &Path,
    out: &Path,
    table1_mode: bool,
) -> Result<(), AppError> {
    let points = io::read_points(points_path).map_err(in_err)?;
    let artifacts = execute_solve(config, table1_mode)?;
    let mapped = map_points_through(&artifacts.result, &points)?;
    std::fs::create_dir_all(out)
        .map_err(|e| AppError::Input(format!("cannot create {}: {e}", out.display())))?;
    io::write_points(&out.join("mapped_points.txt"), &mapped).map_err(out_err)?;
    write_solve_artifacts(config, &artifacts, out)?;
    if !artifacts.result.converged {
        return Err(AppError::NotConverged {
            iterations: artifacts.result.iterations,
            ratio: f64::NAN,
        });
    }
    Ok(())
}

/// Maps original-domain points back through xi_final, shifting in and out
/// of the embedded domain for free-boundary runs.
fn map_points_through(
    result: &SolveResult,
    points: &[[f64; 3]],
) -> Result<Vec<[f64; 3]>, AppError> {
    let h = result.grid().spacing();
    let delta = match &result.embedding {
        Some(emb) => [
            emb.offsets.0 as f64 * h,
            emb.offsets.1 as f64 * h,
            emb.offsets.2 as f64 * h,
        ],
        None => [0.0; 3],
    };
    let shifted: Vec<[f64; 3]> = points
        .iter()
        .map(|p| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]])
        .collect();
    let mapped = denseq::mesh::map_points_to_reference(&shifted, &result.xi_final)
        .map_err(|e| AppError::Input(e.to_string()))?;
    Ok(mapped
        .iter()
        .map(|p| [p[0] - delta[0], p[1] - delta[1], p[2] - delta[2]])
        .collect())
}
