//! The application layer: triangle meshes, region-based density
//! rasterization, mesh deformation through the forward map, morphing frame
//! sequences, and backward point mapping for adaptive remeshing.

use crate::forward_map::{build_forward_map, ForwardMap, ForwardMapError};
use crate::grid::{DensityField, GridSpec, ReferenceMap, ScalarField};
use crate::solver::SolveResult;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("triangle {triangle} references vertex {index} out of range")]
    IndexOutOfRange { triangle: usize, index: u32 },
    #[error("triangle {triangle} is degenerate (zero area)")]
    DegenerateTriangle { triangle: usize },
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("vertex {vertex} is outside the forward map hull: {source}")]
    VertexOutOfHull {
        vertex: usize,
        source: ForwardMapError,
    },
    #[error("point {index} is outside the grid domain")]
    OutOfDomain { index: usize },
    #[error("solve result carries no snapshots; rerun with a snapshot stride")]
    NoSnapshots,
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<MeshError>,
    },
    #[error("non-positive density value {value} (region {region:?})")]
    NonPositiveDensity { value: f64, region: Option<usize> },
    #[error(transparent)]
    ForwardMap(#[from] ForwardMapError),
}

/// A triangle mesh: vertex positions plus index triples.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceMesh {
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[u32; 3]>,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[u32; 3]>) -> Result<Self, MeshError> {
        if triangles.is_empty() {
            return Err(MeshError::EmptyMesh);
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &idx in tri {
                if idx as usize >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        triangle: t,
                        index: idx,
                    });
                }
            }
            let [a, b, c] = [
                vertices[tri[0] as usize],
                vertices[tri[1] as usize],
                vertices[tri[2] as usize],
            ];
            let ab = sub(b, a);
            let ac = sub(c, a);
            let n = cross(ab, ac);
            if dot(n, n) == 0.0 {
                return Err(MeshError::DegenerateTriangle { triangle: t });
            }
        }
        Ok(Self { vertices, triangles })
    }

    /// Same connectivity, new vertex positions; skips the degeneracy check
    /// (a valid deformation may flatten a triangle numerically).
    fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Self {
        Self {
            vertices,
            triangles: self.triangles.clone(),
        }
    }

    /// An axis-aligned box as 12 triangles with outward orientation.
    pub fn box_mesh(min: [f64; 3], max: [f64; 3]) -> Self {
        let v = |mask: usize| {
            [
                if mask & 1 != 0 { max[0] } else { min[0] },
                if mask & 2 != 0 { max[1] } else { min[1] },
                if mask & 4 != 0 { max[2] } else { min[2] },
            ]
        };
        let vertices: Vec<[f64; 3]> = (0..8).map(v).collect();
        // Two triangles per face, outward normals.
        let triangles = vec![
            [0, 2, 1],
            [1, 2, 3], // z = min
            [4, 5, 6],
            [5, 7, 6], // z = max
            [0, 1, 4],
            [1, 5, 4], // y = min
            [2, 6, 3],
            [3, 6, 7], // y = max
            [0, 4, 2],
            [2, 4, 6], // x = min
            [1, 3, 5],
            [3, 7, 5], // x = max
        ];
        Self { vertices, triangles }
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// Signed enclosed volume by the divergence theorem; positive for
    /// outward-oriented closed meshes.
    pub fn volume(&self) -> f64 {
        let mut six_v = 0.0;
        for tri in &self.triangles {
            let a = self.vertices[tri[0] as usize];
            let b = self.vertices[tri[1] as usize];
            let c = self.vertices[tri[2] as usize];
            six_v += dot(a, cross(b, c));
        }
        six_v / 6.0
    }

    pub fn bbox(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for axis in 0..3 {
                lo[axis] = lo[axis].min(v[axis]);
                hi[axis] = hi[axis].max(v[axis]);
            }
        }
        (lo, hi)
    }

    /// Ray-parity interior test for watertight meshes: a ray along +x, with
    /// the direction jittered when a triangle is grazed.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        const DIRS: [[f64; 3]; 4] = [
            [1.0, 0.0, 0.0],
            [1.0, 1.3e-4, 2.1e-4],
            [1.0, -2.7e-4, 0.9e-4],
            [1.0, 3.1e-4, -1.9e-4],
        ];
        'dirs: for dir in DIRS {
            let mut crossings = 0usize;
            for tri in &self.triangles {
                let a = self.vertices[tri[0] as usize];
                let b = self.vertices[tri[1] as usize];
                let c = self.vertices[tri[2] as usize];
                match ray_triangle(p, dir, a, b, c) {
                    RayHit::Miss => {}
                    RayHit::Hit => crossings += 1,
                    RayHit::Grazing => continue 'dirs,
                }
            }
            return crossings % 2 == 1;
        }
        // Every jitter grazed something; fall back to the last parity.
        let dir = DIRS[DIRS.len() - 1];
        let mut crossings = 0usize;
        for tri in &self.triangles {
            let a = self.vertices[tri[0] as usize];
            let b = self.vertices[tri[1] as usize];
            let c = self.vertices[tri[2] as usize];
            if !matches!(ray_triangle(p, dir, a, b, c), RayHit::Miss) {
                crossings += 1;
            }
        }
        crossings % 2 == 1
    }
}

enum RayHit {
    Miss,
    Hit,
    Grazing,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Moller-Trumbore with an explicit "grazing" outcome near edges, the
/// triangle plane, or the ray origin.
fn ray_triangle(origin: [f64; 3], dir: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> RayHit {
    const EPS: f64 = 1e-9;
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < EPS * (dot(e1, e1) * dot(e2, e2)).sqrt().max(1e-30) {
        // Ray nearly parallel to the triangle: cannot decide robustly.
        let n = cross(e1, e2);
        let dist = dot(n, sub(origin, a));
        if dist.abs() < EPS * dot(n, n).sqrt() {
            return RayHit::Grazing;
        }
        return RayHit::Miss;
    }
    let inv = 1.0 / det;
    let t_vec = sub(origin, a);
    let u = dot(t_vec, p) * inv;
    let q = cross(t_vec, e1);
    let v = dot(dir, q) * inv;
    let t = dot(e2, q) * inv;
    if u < -EPS || v < -EPS || u + v > 1.0 + EPS || t < -EPS {
        return RayHit::Miss;
    }
    if u < EPS || v < EPS || u + v > 1.0 - EPS || t < EPS {
        return RayHit::Grazing;
    }
    RayHit::Hit
}

/// A region predicate on grid coordinates.
#[derive(Debug, Clone)]
pub enum RegionShape {
    Box { min: [f64; 3], max: [f64; 3] },
    Ball { center: [f64; 3], radius: f64 },
    MeshInterior(SurfaceMesh),
}

impl RegionShape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            RegionShape::Box { min, max } => {
                (0..3).all(|a| p[a] >= min[a] && p[a] <= max[a])
            }
            RegionShape::Ball { center, radius } => {
                let d = sub(p, *center);
                dot(d, d) <= radius * radius
            }
            RegionShape::MeshInterior(mesh) => mesh.contains(p),
        }
    }
}

/// How a region's number becomes a density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegionWeight {
    /// The density value itself.
    Value(f64),
    /// A raw weight divided by the region's rasterized volume
    /// (node count times h^3).
    PerVolume(f64),
}

#[derive(Debug, Clone)]
pub struct Region {
    pub shape: RegionShape,
    pub weight: RegionWeight,
}

/// An ordered list of regions over a background density; later entries
/// override earlier ones on overlap.
#[derive(Debug, Clone)]
pub struct RegionDensitySpec {
    pub background: f64,
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone)]
pub struct RasterizeOutcome {
    pub density: DensityField,
    /// Indices of regions that matched zero nodes (reported, not fatal).
    pub empty_regions: Vec<usize>,
}

/// Samples the region spec at every grid node.
pub fn rasterize_density(
    spec: &RegionDensitySpec,
    grid: GridSpec,
) -> Result<RasterizeOutcome, MeshError> {
    if !(spec.background > 0.0) {
        return Err(MeshError::NonPositiveDensity {
            value: spec.background,
            region: None,
        });
    }
    for (r, region) in spec.regions.iter().enumerate() {
        let raw = match region.weight {
            RegionWeight::Value(v) => v,
            RegionWeight::PerVolume(w) => w,
        };
        if !(raw > 0.0) {
            return Err(MeshError::NonPositiveDensity {
                value: raw,
                region: Some(r),
            });
        }
    }

    let (l, m, n) = grid.dims();
    // Last matching region wins at each node.
    let mut owner: Vec<Option<usize>> = vec![None; grid.node_count()];
    let mut counts = vec![0usize; spec.regions.len()];
    for k in 0..n {
        for j in 0..m {
            for i in 0..l {
                let p = grid.coords(i, j, k);
                for (r, region) in spec.regions.iter().enumerate().rev() {
                    if region.shape.contains(p) {
                        owner[grid.index(i, j, k)] = Some(r);
                        counts[r] += 1;
                        break;
                    }
                }
            }
        }
    }
    let empty_regions: Vec<usize> = counts
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == 0)
        .map(|(r, _)| r)
        .collect();

    let h3 = grid.spacing().powi(3);
    let region_value: Vec<f64> = spec
        .regions
        .iter()
        .enumerate()
        .map(|(r, region)| match region.weight {
            RegionWeight::Value(v) => v,
            RegionWeight::PerVolume(w) => {
                if counts[r] == 0 {
                    // Unmatched region contributes nothing anyway.
                    spec.background
                } else {
                    w / (counts[r] as f64 * h3)
                }
            }
        })
        .collect();

    let values: Vec<f64> = owner
        .iter()
        .map(|o| match o {
            Some(r) => region_value[*r],
            None => spec.background,
        })
        .collect();
    let density = DensityField::new(ScalarField::from_values(grid, values).expect("finite"))
        .map_err(|e| match e {
            crate::grid::GridError::NonPositiveDensity { value, .. } => {
                MeshError::NonPositiveDensity {
                    value,
                    region: None,
                }
            }
            _ => MeshError::NonPositiveDensity {
                value: f64::NAN,
                region: None,
            },
        })?;
    Ok(RasterizeOutcome {
        density,
        empty_regions,
    })
}

/// Uniform scale plus translation mapping model coordinates into grid
/// coordinates: `grid = scale * model + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitTransform {
    pub scale: f64,
    pub offset: [f64; 3],
}

impl FitTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            self.scale * p[0] + self.offset[0],
            self.scale * p[1] + self.offset[1],
            self.scale * p[2] + self.offset[2],
        ]
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.offset[0]) / self.scale,
            (p[1] - self.offset[1]) / self.scale,
            (p[2] - self.offset[2]) / self.scale,
        ]
    }
}

/// Scales the mesh uniformly into the grid coordinate box, leaving `margin`
/// (a fraction of the extent, default 0.1) free on every side, and returns
/// the recorded transform so outputs can be mapped back.
pub fn fit_to_grid(mesh: &SurfaceMesh, grid: GridSpec, margin: f64) -> (SurfaceMesh, FitTransform) {
    let (lo, hi) = mesh.bbox();
    let extent = grid.extent();
    let mut scale = f64::INFINITY;
    for axis in 0..3 {
        let target = extent[axis] * (1.0 - 2.0 * margin);
        let span = hi[axis] - lo[axis];
        if span > 0.0 {
            scale = scale.min(target / span);
        }
    }
    if !scale.is_finite() {
        scale = 1.0;
    }
    let mut offset = [0.0f64; 3];
    for axis in 0..3 {
        let mid_model = 0.5 * (lo[axis] + hi[axis]);
        offset[axis] = 0.5 * extent[axis] - scale * mid_model;
    }
    let t = FitTransform { scale, offset };
    let vertices = mesh.vertices.iter().map(|v| t.apply(*v)).collect();
    (mesh.with_vertices(vertices), t)
}

/// Replaces every vertex by its forward-map image; connectivity is
/// untouched.
pub fn deform_mesh(mesh: &SurfaceMesh, fm: &ForwardMap) -> Result<SurfaceMesh, MeshError> {
    let mut vertices = Vec::with_capacity(mesh.vertices.len());
    for (idx, v) in mesh.vertices.iter().enumerate() {
        let q = fm
            .query(*v)
            .map_err(|source| MeshError::VertexOutOfHull { vertex: idx, source })?;
        vertices.push(q);
    }
    Ok(mesh.with_vertices(vertices))
}

fn shift(p: [f64; 3], delta: [f64; 3], sign: f64) -> [f64; 3] {
    [
        p[0] + sign * delta[0],
        p[1] + sign * delta[1],
        p[2] + sign * delta[2],
    ]
}

fn embedding_shift(result: &SolveResult) -> [f64; 3] {
    match result.embedding {
        Some(emb) => {
            let h = result.grid().spacing();
            [
                emb.offsets.0 as f64 * h,
                emb.offsets.1 as f64 * h,
                emb.offsets.2 as f64 * h,
            ]
        }
        None => [0.0; 3],
    }
}

fn deform_against_map(
    mesh: &SurfaceMesh,
    xi: &ReferenceMap,
    delta: [f64; 3],
) -> Result<SurfaceMesh, MeshError> {
    let fm = build_forward_map(xi)?;
    let mut vertices = Vec::with_capacity(mesh.vertices.len());
    for (idx, v) in mesh.vertices.iter().enumerate() {
        let q = fm
            .query(shift(*v, delta, 1.0))
            .map_err(|source| MeshError::VertexOutOfHull { vertex: idx, source })?;
        vertices.push(shift(q, delta, -1.0));
    }
    Ok(mesh.with_vertices(vertices))
}

/// Deforms a mesh given in original-domain grid coordinates through a
/// solve result, handling the sea embedding offset for free-boundary runs.
pub fn deform_through(result: &SolveResult, mesh: &SurfaceMesh) -> Result<SurfaceMesh, MeshError> {
    deform_against_map(mesh, &result.xi_final, embedding_shift(result))
}

/// An ordered morphing sequence: `(iteration, deformed mesh)` per snapshot.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<(usize, SurfaceMesh)>,
}

/// One deformed mesh per stored snapshot; frame 0 is the undeformed input.
pub fn morph_frames(mesh: &SurfaceMesh, result: &SolveResult) -> Result<FrameSequence, MeshError> {
    if result.snapshots.is_empty() {
        return Err(MeshError::NoSnapshots);
    }
    let delta = embedding_shift(result);
    let mut frames = Vec::with_capacity(result.snapshots.len());
    for (frame, (iteration, xi)) in result.snapshots.iter().enumerate() {
        let deformed = deform_against_map(mesh, xi, delta).map_err(|source| MeshError::Frame {
            frame,
            source: Box::new(source),
        })?;
        frames.push((*iteration, deformed));
    }
    Ok(FrameSequence { frames })
}

/// Maps points in grid coordinates back to their reference locations by
/// trilinear sampling of the reference map components.
pub fn map_points_to_reference(
    points: &[[f64; 3]],
    xi: &ReferenceMap,
) -> Result<Vec<[f64; 3]>, MeshError> {
    let mut out = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let sample = |field: &ScalarField| field.sample_trilinear(*p);
        let x = sample(xi.x()).ok_or(MeshError::OutOfDomain { index })?;
        let y = sample(xi.y()).ok_or(MeshError::OutOfDomain { index })?;
        let z = sample(xi.z()).ok_or(MeshError::OutOfDomain { index })?;
        out.push([x, y, z]);
    }
    Ok(out)
}
