//! The flat key-value run configuration and the region-spec file format.
//!
//! Both formats are line-based `key = value` text: trivially diffable, no
//! structured-format dependency. Every parse error names the offending key
//! or line.

use denseq::grid::GridSpec;
use denseq::mesh::{Region, RegionDensitySpec, RegionShape, RegionWeight};
use denseq::solver::{BoundarySpec, SolverConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected 'key = value'")]
    Syntax { path: String, line: usize },
    #[error("{path}:{line}: duplicate key '{key}'")]
    Duplicate {
        path: String,
        line: usize,
        key: String,
    },
    #[error("{path}: unknown key '{key}'")]
    UnknownKey { path: String, key: String },
    #[error("{path}: missing required key '{key}'")]
    Missing { path: String, key: String },
    #[error("{path}: key '{key}': {message}")]
    Invalid {
        path: String,
        key: String,
        message: String,
    },
}

/// Where the initial density comes from; a config names exactly one.
#[derive(Debug, Clone, PartialEq)]
pub enum DensitySource {
    Peaks,
    EightRegion,
    Uniform(f64),
    /// Region spec file rasterized onto the grid.
    Regions(PathBuf),
    /// Raw density field file; its grid must match `grid.dims`/`grid.spacing`.
    Field(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputToggles {
    pub fields: bool,
    pub snapshots: bool,
    pub vtk: bool,
    pub log: bool,
}

impl Default for OutputToggles {
    fn default() -> Self {
        Self {
            fields: true,
            snapshots: true,
            vtk: false,
            log: true,
        }
    }
}

/// Mesh handling for the deform/morph subcommands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshOptions {
    /// Pre-scale the mesh into the grid box (transform recorded and
    /// inverted on output). Off means the mesh is already in grid
    /// coordinates.
    pub fit: bool,
    /// Fraction of the grid extent left free per side when fitting.
    pub margin: f64,
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self {
            fit: true,
            margin: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub density: DensitySource,
    pub boundary: BoundarySpec,
    pub solver: SolverConfig,
    pub output: OutputToggles,
    pub mesh: MeshOptions,
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Reads `key = value` lines into an ordered map, rejecting syntax errors
/// and duplicates. `#` comments and blank lines are skipped.
fn read_kv(path: &Path) -> Result<BTreeMap<String, (usize, String)>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: display(path),
        source,
    })?;
    let mut map = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax {
            path: display(path),
            line: line_no,
        })?;
        let key = key.trim().to_string();
        // The region-spec format repeats the `region` key deliberately;
        // disambiguate by appending the line number there.
        let stored_key = if key == "region" {
            format!("region#{line_no}")
        } else {
            key.clone()
        };
        if map
            .insert(stored_key, (line_no, value.trim().to_string()))
            .is_some()
        {
            return Err(ConfigError::Duplicate {
                path: display(path),
                line: line_no,
                key,
            });
        }
    }
    Ok(map)
}

struct KvReader<'a> {
    path: &'a Path,
    map: BTreeMap<String, (usize, String)>,
    used: Vec<String>,
}

impl<'a> KvReader<'a> {
    fn new(path: &'a Path) -> Result<Self, ConfigError> {
        Ok(Self {
            path,
            map: read_kv(path)?,
            used: Vec::new(),
        })
    }

    fn invalid(&self, key: &str, message: String) -> ConfigError {
        ConfigError::Invalid {
            path: display(self.path),
            key: key.to_string(),
            message,
        }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.used.push(key.to_string());
        self.map.get(key).map(|(_, v)| v.clone())
    }

    fn required(&mut self, key: &str) -> Result<String, ConfigError> {
        self.raw(key).ok_or_else(|| ConfigError::Missing {
            path: display(self.path),
            key: key.to_string(),
        })
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.invalid(key, format!("cannot parse '{v}'"))),
        }
    }

    fn parse_or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(self.invalid(key, format!("expected true/false, got '{other}'"))),
            },
        }
    }

    fn numbers(&self, key: &str, value: &str, n: usize) -> Result<Vec<f64>, ConfigError> {
        let parts: Vec<&str> = value.split_whitespace().collect();
        if parts.len() != n {
            return Err(self.invalid(key, format!("expected {n} numbers, got {}", parts.len())));
        }
        parts
            .iter()
            .map(|p| {
                p.parse()
                    .map_err(|_| self.invalid(key, format!("cannot parse '{p}'")))
            })
            .collect()
    }

    /// Any key never requested is unknown — typos fail loudly.
    fn finish(self) -> Result<(), ConfigError> {
        for key in self.map.keys() {
            if !self.used.contains(key) {
                return Err(ConfigError::UnknownKey {
                    path: display(self.path),
                    key: key.clone(),
                });
            }
        }
        Ok(())
    }
}

pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let mut kv = KvReader::new(path)?;

    let dims_raw = kv.required("grid.dims")?;
    let dims_parts: Vec<&str> = dims_raw.split_whitespace().collect();
    if dims_parts.len() != 3 {
        return Err(kv.invalid(
            "grid.dims",
            format!("expected 3 integers, got {}", dims_parts.len()),
        ));
    }
    let mut dims = [0usize; 3];
    for (d, p) in dims.iter_mut().zip(&dims_parts) {
        *d = p
            .parse()
            .map_err(|_| kv.invalid("grid.dims", format!("cannot parse '{p}'")))?;
    }
    let spacing: f64 = kv.parse_or("grid.spacing", 1.0)?;
    let grid = GridSpec::new((dims[0], dims[1], dims[2]), spacing)
        .map_err(|e| kv.invalid("grid.dims", e.to_string()))?;

    let preset = kv.raw("density.preset");
    let uniform_value: Option<f64> = kv.parse("density.uniform_value")?;
    let regions = kv.raw("density.regions");
    let field = kv.raw("density.field");
    let sources = preset.is_some() as usize + regions.is_some() as usize + field.is_some() as usize;
    if sources != 1 {
        return Err(kv.invalid(
            "density.preset",
            format!(
                "exactly one of density.preset, density.regions, density.field required, found {sources}"
            ),
        ));
    }
    let density = if let Some(name) = preset {
        match name.as_str() {
            "peaks" => DensitySource::Peaks,
            "eight_region" => DensitySource::EightRegion,
            "uniform" => DensitySource::Uniform(uniform_value.ok_or_else(|| {
                ConfigError::Missing {
                    path: display(path),
                    key: "density.uniform_value".into(),
                }
            })?),
            other => {
                return Err(kv.invalid(
                    "density.preset",
                    format!("unknown preset '{other}' (peaks, eight_region, uniform)"),
                ))
            }
        }
    } else if let Some(p) = regions {
        DensitySource::Regions(PathBuf::from(p))
    } else {
        DensitySource::Field(PathBuf::from(field.unwrap()))
    };
    if uniform_value.is_some() && density != DensitySource::Uniform(uniform_value.unwrap()) {
        return Err(kv.invalid(
            "density.uniform_value",
            "only valid with density.preset = uniform".into(),
        ));
    }

    let mode = kv.raw("boundary.mode").unwrap_or_else(|| "no_flux".into());
    let padding: Option<usize> = kv.parse("boundary.padding")?;
    let boundary = match mode.as_str() {
        "no_flux" => {
            if padding.is_some() {
                return Err(kv.invalid(
                    "boundary.padding",
                    "only valid with boundary.mode = free".into(),
                ));
            }
            BoundarySpec::no_flux()
        }
        "free" => BoundarySpec::free(padding.ok_or_else(|| ConfigError::Missing {
            path: display(path),
            key: "boundary.padding".into(),
        })?),
        other => {
            return Err(kv.invalid(
                "boundary.mode",
                format!("unknown mode '{other}' (no_flux, free)"),
            ))
        }
    };

    let defaults = SolverConfig::default();
    let mut solver = SolverConfig {
        epsilon: kv.parse_or("solver.epsilon", defaults.epsilon)?,
        n_max: kv.parse_or("solver.n_max", defaults.n_max)?,
        kappa: kv.parse_or("solver.kappa", defaults.kappa)?,
        cg: None,
        snapshot_stride: kv.parse_or("solver.snapshot_stride", defaults.snapshot_stride)?,
    };
    let cg_tol: Option<f64> = kv.parse("solver.cg_tolerance")?;
    let cg_iters: Option<usize> = kv.parse("solver.cg_max_iters")?;
    if cg_tol.is_some() || cg_iters.is_some() {
        let base = denseq::diffusion::CgSettings::for_grid(grid);
        solver.cg = Some(denseq::diffusion::CgSettings {
            rel_tolerance: cg_tol.unwrap_or(base.rel_tolerance),
            max_iters: cg_iters.unwrap_or(base.max_iters),
        });
    }

    let output = OutputToggles {
        fields: kv.bool_or("output.fields", true)?,
        snapshots: kv.bool_or("output.snapshots", true)?,
        vtk: kv.bool_or("output.vtk", false)?,
        log: kv.bool_or("output.log", true)?,
    };
    let mesh = MeshOptions {
        fit: kv.bool_or("mesh.fit", true)?,
        margin: kv.parse_or("mesh.margin", 0.1)?,
    };
    if !(mesh.margin >= 0.0 && mesh.margin < 0.5) {
        return Err(kv.invalid("mesh.margin", "must be in [0, 0.5)".into()));
    }

    kv.finish()?;
    Ok(RunConfig {
        grid,
        density,
        boundary,
        solver,
        output,
        mesh,
    })
}

/// Region spec file: `background = <v>` plus any number of
/// `region = <shape args...> <value|per_volume> <w>` lines, where the shape
/// is `box x0 y0 z0 x1 y1 z1`, `ball cx cy cz r`, or `mesh <path>`.
/// Later lines override earlier ones on overlap. Mesh paths are resolved
/// relative to the spec file.
pub fn load_region_spec(path: &Path) -> Result<RegionDensitySpec, ConfigError> {
    let mut kv = KvReader::new(path)?;
    let background: f64 = kv.parse("background")?.ok_or_else(|| ConfigError::Missing {
        path: display(path),
        key: "background".into(),
    })?;
    let region_keys: Vec<String> = kv
        .map
        .keys()
        .filter(|k| k.starts_with("region#"))
        .cloned()
        .collect();
    // Restore file order (BTreeMap sorts "region#10" before "region#9").
    let mut ordered: Vec<(usize, String, String)> = region_keys
        .iter()
        .map(|k| {
            let (line, value) = kv.map[k].clone();
            (line, k.clone(), value)
        })
        .collect();
    ordered.sort_by_key(|(line, _, _)| *line);

    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut regions = Vec::new();
    for (line, key, value) in ordered {
        kv.used.push(key);
        let tokens: Vec<&str> = value.split_whitespace().collect();
        let key_name = format!("region (line {line})");
        let invalid = |message: String| ConfigError::Invalid {
            path: display(path),
            key: key_name.clone(),
            message,
        };
        if tokens.is_empty() {
            return Err(invalid("empty region".into()));
        }
        let (shape, rest) = match tokens[0] {
            "box" => {
                let nums = kv.numbers(&key_name, &tokens[1..7.min(tokens.len())].join(" "), 6)?;
                (
                    RegionShape::Box {
                        min: [nums[0], nums[1], nums[2]],
                        max: [nums[3], nums[4], nums[5]],
                    },
                    &tokens[7..],
                )
            }
            "ball" => {
                let nums = kv.numbers(&key_name, &tokens[1..5.min(tokens.len())].join(" "), 4)?;
                (
                    RegionShape::Ball {
                        center: [nums[0], nums[1], nums[2]],
                        radius: nums[3],
                    },
                    &tokens[5..],
                )
            }
            "mesh" => {
                if tokens.len() < 2 {
                    return Err(invalid("mesh region needs a path".into()));
                }
                let mesh_path = base_dir.join(tokens[1]);
                let mesh = denseq::io::read_mesh(&mesh_path)
                    .map_err(|e| invalid(format!("cannot load mesh: {e}")))?;
                (RegionShape::MeshInterior(mesh), &tokens[2..])
            }
            other => return Err(invalid(format!("unknown shape '{other}' (box, ball, mesh)"))),
        };
        if rest.len() != 2 {
            return Err(invalid(format!(
                "expected '<value|per_volume> <number>' after the shape, got {} tokens",
                rest.len()
            )));
        }
        let w: f64 = rest[1]
            .parse()
            .map_err(|_| invalid(format!("cannot parse weight '{}'", rest[1])))?;
        let weight = match rest[0] {
            "value" => RegionWeight::Value(w),
            "per_volume" => RegionWeight::PerVolume(w),
            other => return Err(invalid(format!("unknown weight kind '{other}'"))),
        };
        regions.push(Region { shape, weight });
    }
    kv.finish()?;
    Ok(RegionDensitySpec {
        background,
        regions,
    })
}
