//! On-disk formats: the binary field file, the ASCII triangle-mesh and
//! point-list formats, the embedding record, the mismatch report, and a
//! legacy structured-grid writer for external visualization.
//!
//! All writers are deterministic: the same in-memory data always produces
//! the same bytes.

use crate::forward_map::MismatchReport;
use crate::grid::{DensityField, GridError, GridSpec, ReferenceMap, ScalarField, VectorField};
use crate::mesh::{MeshError, SurfaceMesh};
use crate::solver::Embedding;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: not a field file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: String, offset: u64 },
    #[error("{path}: unknown field kind {kind}")]
    UnknownKind { path: String, kind: u32 },
    #[error("{path}: kind {kind:?} requires {expected} components, header says {actual}")]
    ComponentMismatch {
        path: String,
        kind: FieldKind,
        expected: u32,
        actual: u32,
    },
    #[error("{path}: expected field kind {expected:?}, found {actual:?}")]
    WrongKind {
        path: String,
        expected: FieldKind,
        actual: FieldKind,
    },
    #[error("{path}: {source}")]
    Grid {
        path: String,
        #[source]
        source: GridError,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Mesh {
        path: String,
        #[source]
        source: MeshError,
    },
}

const MAGIC: &[u8; 8] = b"DSEQFLD1";

/// What the stored values mean; fixes the component count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    Scalar,
    Density,
    Vector,
    ReferenceMap,
}

impl FieldKind {
    fn code(self) -> u32 {
        match self {
            FieldKind::Scalar => 0,
            FieldKind::Density => 1,
            FieldKind::Vector => 2,
            FieldKind::ReferenceMap => 3,
        }
    }

    fn from_code(code: u32, path: &Path) -> Result<Self, IoError> {
        Ok(match code {
            0 => FieldKind::Scalar,
            1 => FieldKind::Density,
            2 => FieldKind::Vector,
            3 => FieldKind::ReferenceMap,
            _ => {
                return Err(IoError::UnknownKind {
                    path: display(path),
                    kind: code,
                })
            }
        })
    }

    fn components(self) -> u32 {
        match self {
            FieldKind::Scalar | FieldKind::Density => 1,
            FieldKind::Vector | FieldKind::ReferenceMap => 3,
        }
    }
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// A field file read back into memory, kind not yet interpreted.
#[derive(Debug, Clone)]
pub struct RawField {
    pub kind: FieldKind,
    pub grid: GridSpec,
    /// One value vector per component, each of length `grid.node_count()`.
    pub components: Vec<Vec<f64>>,
}

/// Header: magic, kind u32, component count u32, dims 3xu64, spacing f64;
/// then the node values per component, i fastest. Everything little-endian.
pub fn write_field_file(
    path: &Path,
    kind: FieldKind,
    grid: GridSpec,
    components: &[&[f64]],
) -> Result<(), IoError> {
    assert_eq!(components.len(), kind.components() as usize);
    for c in components {
        assert_eq!(c.len(), grid.node_count());
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&kind.code().to_le_bytes())?;
    w.write_all(&kind.components().to_le_bytes())?;
    let (l, m, n) = grid.dims();
    for d in [l, m, n] {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&grid.spacing().to_le_bytes())?;
    for component in components {
        for v in *component {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_field_file(path: &Path) -> Result<RawField, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut read_exact = |r: &mut BufReader<File>, buf: &mut [u8]| -> Result<(), IoError> {
        let mut filled = 0usize;
        while filled < buf.len() {
            let n = r.read(&mut buf[filled..])?;
            if n == 0 {
                return Err(IoError::Truncated {
                    path: display(path),
                    offset: offset + filled as u64,
                });
            }
            filled += n;
        }
        offset += buf.len() as u64;
        Ok(())
    };

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(IoError::BadMagic { path: display(path) });
    }
    let mut u32_buf = [0u8; 4];
    read_exact(&mut r, &mut u32_buf)?;
    let kind = FieldKind::from_code(u32::from_le_bytes(u32_buf), path)?;
    read_exact(&mut r, &mut u32_buf)?;
    let n_components = u32::from_le_bytes(u32_buf);
    if n_components != kind.components() {
        return Err(IoError::ComponentMismatch {
            path: display(path),
            kind,
            expected: kind.components(),
            actual: n_components,
        });
    }
    let mut u64_buf = [0u8; 8];
    let mut dims = [0usize; 3];
    for d in &mut dims {
        read_exact(&mut r, &mut u64_buf)?;
        *d = u64::from_le_bytes(u64_buf) as usize;
    }
    read_exact(&mut r, &mut u64_buf)?;
    let h = f64::from_le_bytes(u64_buf);
    let grid = GridSpec::new((dims[0], dims[1], dims[2]), h).map_err(|source| IoError::Grid {
        path: display(path),
        source,
    })?;

    let mut components = Vec::with_capacity(n_components as usize);
    for _ in 0..n_components {
        let mut values = Vec::with_capacity(grid.node_count());
        for _ in 0..grid.node_count() {
            read_exact(&mut r, &mut u64_buf)?;
            values.push(f64::from_le_bytes(u64_buf));
        }
        components.push(values);
    }
    // The file must end here.
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(IoError::Truncated {
            path: display(path),
            offset,
        });
    }
    Ok(RawField {
        kind,
        grid,
        components,
    })
}

fn grid_err(path: &Path) -> impl Fn(GridError) -> IoError + '_ {
    move |source| IoError::Grid {
        path: display(path),
        source,
    }
}

pub fn write_scalar_field(path: &Path, field: &ScalarField) -> Result<(), IoError> {
    write_field_file(path, FieldKind::Scalar, field.grid(), &[field.values()])
}

pub fn write_density_field(path: &Path, rho: &DensityField) -> Result<(), IoError> {
    write_field_file(path, FieldKind::Density, rho.grid(), &[rho.values()])
}

pub fn write_reference_map(path: &Path, xi: &ReferenceMap) -> Result<(), IoError> {
    write_field_file(
        path,
        FieldKind::ReferenceMap,
        xi.grid(),
        &[xi.x().values(), xi.y().values(), xi.z().values()],
    )
}

fn expect_kind(raw: &RawField, expected: FieldKind, path: &Path) -> Result<(), IoError> {
    if raw.kind != expected {
        return Err(IoError::WrongKind {
            path: display(path),
            expected,
            actual: raw.kind,
        });
    }
    Ok(())
}

pub fn read_density_field(path: &Path) -> Result<DensityField, IoError> {
    let mut raw = read_field_file(path)?;
    expect_kind(&raw, FieldKind::Density, path)?;
    let values = raw.components.pop().expect("one component");
    let field = ScalarField::from_values(raw.grid, values).map_err(grid_err(path))?;
    DensityField::new(field).map_err(grid_err(path))
}

pub fn read_reference_map(path: &Path) -> Result<ReferenceMap, IoError> {
    let raw = read_field_file(path)?;
    expect_kind(&raw, FieldKind::ReferenceMap, path)?;
    let mut it = raw.components.into_iter();
    let mk = |values| ScalarField::from_values(raw.grid, values).map_err(grid_err(path));
    let x = mk(it.next().expect("three components"))?;
    let y = mk(it.next().expect("three components"))?;
    let z = mk(it.next().expect("three components"))?;
    let v = VectorField::new(x, y, z).map_err(grid_err(path))?;
    Ok(ReferenceMap::from_components(v))
}

/// ASCII triangle mesh: `v x y z` vertices, `f a b c` 1-indexed faces;
/// `#` comments and blank lines are skipped.
pub fn read_mesh(path: &Path) -> Result<SurfaceMesh, IoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = line_no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let tag = parts.next().unwrap();
        let parse_err = |message: String| IoError::Parse {
            path: display(path),
            line: line_no,
            message,
        };
        match tag {
            "v" => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    let token = parts
                        .next()
                        .ok_or_else(|| parse_err("vertex needs 3 coordinates".into()))?;
                    *c = token
                        .parse()
                        .map_err(|_| parse_err(format!("bad coordinate '{token}'")))?;
                }
                vertices.push(coords);
            }
            "f" => {
                let mut idx = [0u32; 3];
                for v in &mut idx {
                    let token = parts
                        .next()
                        .ok_or_else(|| parse_err("face needs 3 vertex indices".into()))?;
                    let one_based: u32 = token
                        .parse()
                        .map_err(|_| parse_err(format!("bad vertex index '{token}'")))?;
                    if one_based == 0 {
                        return Err(parse_err("face indices are 1-based".into()));
                    }
                    *v = one_based - 1;
                }
                triangles.push(idx);
            }
            other => {
                return Err(parse_err(format!("unsupported record '{other}'")));
            }
        }
        if parts.next().is_some() {
            return Err(IoError::Parse {
                path: display(path),
                line: line_no,
                message: "trailing tokens".into(),
            });
        }
    }
    SurfaceMesh::new(vertices, triangles).map_err(|source| IoError::Mesh {
        path: display(path),
        source,
    })
}

pub fn write_mesh(path: &Path, mesh: &SurfaceMesh) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in mesh.vertices() {
        writeln!(w, "v {:.17} {:.17} {:.17}", v[0], v[1], v[2])?;
    }
    for t in mesh.triangles() {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

/// Point list: one `x y z` triple per line; `#` comments allowed.
pub fn read_points(path: &Path) -> Result<Vec<[f64; 3]>, IoError> {
    let reader = BufReader::new(File::open(path)?);
    let mut points = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = line_no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(IoError::Parse {
                path: display(path),
                line: line_no,
                message: format!("expected 3 coordinates, found {}", tokens.len()),
            });
        }
        let mut p = [0.0f64; 3];
        for (c, token) in p.iter_mut().zip(&tokens) {
            *c = token.parse().map_err(|_| IoError::Parse {
                path: display(path),
                line: line_no,
                message: format!("bad coordinate '{token}'"),
            })?;
        }
        points.push(p);
    }
    Ok(points)
}

pub fn write_points(path: &Path, points: &[[f64; 3]]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in points {
        writeln!(w, "{:.17} {:.17} {:.17}", p[0], p[1], p[2])?;
    }
    w.flush()?;
    Ok(())
}

/// The embedding record written next to free-boundary solve artifacts so
/// `report` can reconstruct the original-domain region.
pub fn render_embedding(emb: &Embedding) -> String {
    format!(
        "offsets = {} {} {}\ninner_dims = {} {} {}\n",
        emb.offsets.0, emb.offsets.1, emb.offsets.2, emb.inner_dims.0, emb.inner_dims.1, emb.inner_dims.2,
    )
}

pub fn read_embedding(path: &Path) -> Result<Embedding, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut offsets = None;
    let mut inner_dims = None;
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| IoError::Parse {
            path: display(path),
            line: line_no,
            message,
        };
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| parse_err("expected 'key = a b c'".into()))?;
        let mut triple = [0usize; 3];
        let tokens: Vec<&str> = value.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 integers, found {}",
                tokens.len()
            )));
        }
        for (slot, token) in triple.iter_mut().zip(&tokens) {
            *slot = token
                .parse()
                .map_err(|_| parse_err(format!("bad integer '{token}'")))?;
        }
        match key.trim() {
            "offsets" => offsets = Some((triple[0], triple[1], triple[2])),
            "inner_dims" => inner_dims = Some((triple[0], triple[1], triple[2])),
            other => return Err(parse_err(format!("unknown key '{other}'"))),
        }
    }
    let missing = |key: &str| IoError::Parse {
        path: display(path),
        line: 0,
        message: format!("missing key '{key}'"),
    };
    Ok(Embedding {
        offsets: offsets.ok_or_else(|| missing("offsets"))?,
        inner_dims: inner_dims.ok_or_else(|| missing("inner_dims"))?,
    })
}

/// Renders the mismatch report text; identical inputs yield identical
/// bytes, so a report regenerated from stored artifacts matches the one
/// written during the solve.
pub fn render_report(embedding: Option<Embedding>, report: &MismatchReport) -> String {
    let mut out = String::new();
    let grid = report.e.grid();
    let (l, m, n) = grid.dims();
    out.push_str(&format!("grid = {l} {m} {n}\n"));
    out.push_str(&format!("spacing = {:.17e}\n", grid.spacing()));
    if let Some(emb) = embedding {
        out.push_str(&format!(
            "embedding.offsets = {} {} {}\n",
            emb.offsets.0, emb.offsets.1, emb.offsets.2
        ));
        out.push_str(&format!(
            "embedding.inner_dims = {} {} {}\n",
            emb.inner_dims.0, emb.inner_dims.1, emb.inner_dims.2
        ));
    }
    out.push_str(&format!("mean_abs_e = {:.17e}\n", report.mean_abs_e));
    out.push_str(&format!("excluded_nodes = {}\n", report.excluded.len()));
    let hist = &report.histogram;
    out.push_str(&format!(
        "histogram.range = {:.17e} {:.17e}\n",
        hist.lo, hist.hi
    ));
    out.push_str(&format!("histogram.bins = {}\n", hist.counts.len()));
    for (bin, count) in hist.counts.iter().enumerate() {
        out.push_str(&format!("histogram.count[{bin}] = {count}\n"));
    }
    out
}

/// Legacy ASCII structured-grid file for external visualization tools:
/// point coordinates (optionally deformed) plus named point scalars.
pub fn write_structured_grid(
    path: &Path,
    grid: GridSpec,
    deformed: Option<&VectorField>,
    scalars: &[(&str, &ScalarField)],
) -> Result<(), IoError> {
    let (l, m, n) = grid.dims();
    let count = grid.node_count();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "denseq structured grid")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_GRID")?;
    writeln!(w, "DIMENSIONS {l} {m} {n}")?;
    writeln!(w, "POINTS {count} double")?;
    for k in 0..n {
        for j in 0..m {
            for i in 0..l {
                let p = match deformed {
                    Some(field) => field.at(i, j, k),
                    None => grid.coords(i, j, k),
                };
                writeln!(w, "{:.17} {:.17} {:.17}", p[0], p[1], p[2])?;
            }
        }
    }
    if !scalars.is_empty() {
        writeln!(w, "POINT_DATA {count}")?;
        for (name, field) in scalars {
            writeln!(w, "SCALARS {name} double 1")?;
            writeln!(w, "LOOKUP_TABLE default")?;
            for v in field.values() {
                writeln!(w, "{v:.17}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_map::mismatch_error;
    use crate::presets;
    use std::fs;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("denseq-io-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn density_round_trip_is_lossless() {
        let g = GridSpec::new((6, 5, 4), 0.37).unwrap();
        let rho = presets::peaks(g);
        let path = tmp("rho.field");
        write_density_field(&path, &rho).unwrap();
        let back = read_density_field(&path).unwrap();
        assert_eq!(back.grid(), g);
        assert_eq!(back.values(), rho.values());
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let g = GridSpec::new((5, 5, 5), 1.0).unwrap();
        let xi = ReferenceMap::identity(g);
        let a = tmp("xi_a.field");
        let b = tmp("xi_b.field");
        write_reference_map(&a, &xi).unwrap();
        let back = read_reference_map(&a).unwrap();
        write_reference_map(&b, &back).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_file_names_byte_offset() {
        let g = GridSpec::new((4, 4, 4), 1.0).unwrap();
        let rho = presets::uniform(g, 1.0).unwrap();
        let path = tmp("trunc.field");
        write_density_field(&path, &rho).unwrap();
        let bytes = fs::read(&path).unwrap();
        let cut = bytes.len() - 11;
        fs::write(&path, &bytes[..cut]).unwrap();
        match read_density_field(&path) {
            Err(IoError::Truncated { offset, .. }) => {
                assert!(offset as usize <= cut + 8);
                assert!(offset as usize >= cut.saturating_sub(8));
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let path = tmp("magic.field");
        fs::write(&path, b"NOTAFLD1somebytesandmorebytes").unwrap();
        assert!(matches!(
            read_field_file(&path),
            Err(IoError::BadMagic { .. })
        ));
    }

    #[test]
    fn kind_mismatch_rejected() {
        let g = GridSpec::new((4, 4, 4), 1.0).unwrap();
        let path = tmp("kind.field");
        write_scalar_field(&path, &ScalarField::new(g, 1.0)).unwrap();
        assert!(matches!(
            read_density_field(&path),
            Err(IoError::WrongKind { .. })
        ));
    }

    #[test]
    fn mesh_round_trip() {
        let mesh = SurfaceMesh::box_mesh([0.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
        let a = tmp("mesh_a.obj");
        let b = tmp("mesh_b.obj");
        write_mesh(&a, &mesh).unwrap();
        let back = read_mesh(&a).unwrap();
        assert_eq!(back.vertices(), mesh.vertices());
        assert_eq!(back.triangles(), mesh.triangles());
        write_mesh(&b, &back).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn mesh_parse_errors_name_line() {
        let path = tmp("bad.obj");
        fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1 2 3\n").unwrap();
        match read_mesh(&path) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn points_round_trip() {
        let points = vec![[0.25, -1.5, 3.0], [1e-3, 2.0, 4.5]];
        let path = tmp("points.txt");
        write_points(&path, &points).unwrap();
        assert_eq!(read_points(&path).unwrap(), points);
    }

    #[test]
    fn embedding_record_round_trip() {
        let emb = Embedding {
            offsets: (8, 8, 0),
            inner_dims: (32, 32, 32),
        };
        let path = tmp("embedding.txt");
        fs::write(&path, render_embedding(&emb)).unwrap();
        assert_eq!(read_embedding(&path).unwrap(), emb);
    }

    #[test]
    fn report_rendering_is_deterministic() {
        let g = GridSpec::new((8, 8, 8), 1.0).unwrap();
        let xi = ReferenceMap::identity(g);
        let rho = presets::uniform(g, 2.0).unwrap();
        let report = mismatch_error(&xi, &rho, None).unwrap();
        let a = render_report(None, &report);
        let b = render_report(None, &report);
        assert_eq!(a, b);
        assert!(a.contains("mean_abs_e = "));
        assert!(a.contains("histogram.bins = 64"));
    }

    #[test]
    fn structured_grid_header_shape() {
        let g = GridSpec::new((4, 4, 4), 1.0).unwrap();
        let path = tmp("grid.vtk");
        let s = ScalarField::new(g, 1.5);
        write_structured_grid(&path, g, None, &[("rho", &s)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
        assert!(text.contains("DIMENSIONS 4 4 4"));
        assert!(text.contains("POINTS 64 double"));
        assert!(text.contains("SCALARS rho double 1"));
    }
}
