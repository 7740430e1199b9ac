//! Dataset ingestion and result serialization: the canonical JSON document,
//! TetGen node/ele pairs with a tensor sidecar, OBJ + JSON attribute output
//! and binary little-endian PLY with per-vertex surface properties.

use crate::assembly::ModeSurfaceMesh;
use crate::error::{Error, Result};
use crate::mesh::TetMesh;
use crate::tensor::{deviator, SymTensor3};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::Path;

/// A tetrahedral mesh with one symmetric tensor per vertex.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeshDataset {
    pub vertices: Vec<[f64; 3]>,
    pub tets: Vec<[usize; 4]>,
    /// Six components per vertex, order: xx yy zz xy yz xz.
    pub tensors: Vec<[f64; 6]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl TensorMeshDataset {
    /// Validate counts, index ranges, finiteness and tet volumes; project
    /// every tensor onto its deviator. Returns warnings for projected
    /// tensors whose trace was significant.
    pub fn validate(&mut self) -> Result<Vec<String>> {
        let mut errors = Vec::new();
        let mut warnings = Vec::new();
        if self.tensors.len() != self.vertices.len() {
            errors.push(format!(
                "tensor count {} != vertex count {}",
                self.tensors.len(),
                self.vertices.len()
            ));
        }
        for (i, v) in self.vertices.iter().enumerate() {
            if v.iter().any(|c| !c.is_finite()) {
                errors.push(format!("vertex {i} has a non-finite coordinate: {v:?}"));
            }
        }
        for (i, t) in self.tensors.iter().enumerate() {
            if t.iter().any(|c| !c.is_finite()) {
                errors.push(format!("tensor {i} has a non-finite component: {t:?}"));
            }
        }
        let nv = self.vertices.len();
        for (i, t) in self.tets.iter().enumerate() {
            if t.iter().any(|&k| k >= nv) {
                errors.push(format!("tet {i} references out-of-range vertex: {t:?}"));
            }
        }
        if errors.is_empty() {
            // degenerate-volume check
            let bbox = self.bbox_diagonal();
            let vol_tol = 1e-12 * bbox * bbox * bbox;
            for (i, t) in self.tets.iter().enumerate() {
                let p: Vec<Vector3<f64>> = t
                    .iter()
                    .map(|&k| Vector3::from_column_slice(&self.vertices[k]))
                    .collect();
                let vol = ((p[1] - p[0]).cross(&(p[2] - p[0]))).dot(&(p[3] - p[0])).abs() / 6.0;
                if vol <= vol_tol {
                    errors.push(format!("tet {i} is degenerate (volume {vol:.3e})"));
                }
            }
        }
        if !errors.is_empty() {
            return Err(Error::ValidationError(errors));
        }
        for (i, c) in self.tensors.iter_mut().enumerate() {
            let t = SymTensor3 {
                xx: c[0],
                yy: c[1],
                zz: c[2],
                xy: c[3],
                yz: c[4],
                xz: c[5],
            };
            let trace = t.trace();
            if trace.abs() > 1e-8 * t.norm().max(f64::MIN_POSITIVE) {
                warnings.push(format!(
                    "tensor {i}: trace {trace:.3e} projected out (deviator applied)"
                ));
            }
            let d = deviator(&t.to_matrix());
            *c = [d.xx, d.yy, d.zz, d.xy, d.yz, d.xz];
        }
        Ok(warnings)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            let p = Vector3::from_column_slice(v);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (hi - lo).norm()
    }

    pub fn to_tet_mesh(&self) -> Result<TetMesh> {
        let vertices = self
            .vertices
            .iter()
            .map(|v| Vector3::from_column_slice(v))
            .collect();
        let tensors = self
            .tensors
            .iter()
            .map(|c| SymTensor3 {
                xx: c[0],
                yy: c[1],
                zz: c[2],
                xy: c[3],
                yz: c[4],
                xz: c[5],
            })
            .collect();
        TetMesh::build(vertices, tensors, self.tets.clone())
    }
}

/// Supported dataset formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Json,
    /// TetGen .node/.ele pair plus a .tensor sidecar; `path` names the .node.
    Tetgen,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<TensorMeshDataset> {
    let mut ds = match format {
        DatasetFormat::Json => {
            let mut s = String::new();
            std::fs::File::open(path)?.read_to_string(&mut s)?;
            serde_json::from_str(&s).map_err(|e| Error::ParseError {
                path: path.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?
        }
        DatasetFormat::Tetgen => load_tetgen(path)?,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &TensorMeshDataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(BufWriter::new(f), ds)
        .map_err(|e| Error::IoError(std::io::Error::other(e)))?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::ParseError {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Numeric rows of a TetGen-style file: comments (#) stripped, blank lines
/// skipped; yields (line number, whitespace-split fields).
fn tetgen_rows(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let f = std::fs::File::open(path)?;
    let mut rows = Vec::new();
    for (ln, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim().to_string();
        if body.is_empty() {
            continue;
        }
        rows.push((ln + 1, body.split_whitespace().map(str::to_string).collect()));
    }
    Ok(rows)
}

fn load_tetgen(node_path: &Path) -> Result<TensorMeshDataset> {
    let ele_path = node_path.with_extension("ele");
    let tensor_path = node_path.with_extension("tensor");

    let rows = tetgen_rows(node_path)?;
    let (hline, header) = rows
        .first()
        .ok_or_else(|| parse_err(node_path, 1, "empty .node file"))?;
    let n: usize = header[0]
        .parse()
        .map_err(|_| parse_err(node_path, *hline, "bad vertex count"))?;
    if rows.len() < n + 1 {
        return Err(parse_err(node_path, rows.len(), "truncated .node file"));
    }
    let mut ids = Vec::with_capacity(n);
    let mut vertices = Vec::with_capacity(n);
    for (ln, fields) in &rows[1..=n] {
        if fields.len() < 4 {
            return Err(parse_err(node_path, *ln, "expected: index x y z"));
        }
        let id: i64 = fields[0]
            .parse()
            .map_err(|_| parse_err(node_path, *ln, "bad vertex index"))?;
        let mut v = [0.0; 3];
        for k in 0..3 {
            v[k] = fields[k + 1]
                .parse()
                .map_err(|_| parse_err(node_path, *ln, "bad coordinate"))?;
        }
        ids.push(id);
        vertices.push(v);
    }
    let base = *ids.iter().min().unwrap_or(&0);

    let rows = tetgen_rows(&ele_path)?;
    let (hline, header) = rows
        .first()
        .ok_or_else(|| parse_err(&ele_path, 1, "empty .ele file"))?;
    let m: usize = header[0]
        .parse()
        .map_err(|_| parse_err(&ele_path, *hline, "bad tet count"))?;
    if rows.len() < m + 1 {
        return Err(parse_err(&ele_path, rows.len(), "truncated .ele file"));
    }
    let mut tets = Vec::with_capacity(m);
    for (ln, fields) in &rows[1..=m] {
        if fields.len() < 5 {
            return Err(parse_err(&ele_path, *ln, "expected: index v0 v1 v2 v3"));
        }
        let mut t = [0usize; 4];
        for k in 0..4 {
            let raw: i64 = fields[k + 1]
                .parse()
                .map_err(|_| parse_err(&ele_path, *ln, "bad tet vertex index"))?;
            let idx = raw - base;
            if idx < 0 {
                return Err(parse_err(&ele_path, *ln, "tet vertex index below base"));
            }
            t[k] = idx as usize;
        }
        tets.push(t);
    }

    let rows = tetgen_rows(&tensor_path)?;
    let mut tensors = Vec::with_capacity(n);
    // Optional one-field header (count); otherwise rows are data.
    let data_rows: &[(usize, Vec<String>)] =
        if rows.first().map(|(_, f)| f.len() == 1).unwrap_or(false) {
            &rows[1..]
        } else {
            &rows[..]
        };
    for (ln, fields) in data_rows {
        // allow an optional leading index column
        let vals: Vec<&String> = if fields.len() >= 7 {
            fields[1..7].iter().collect()
        } else if fields.len() == 6 {
            fields.iter().collect()
        } else {
            return Err(parse_err(
                &tensor_path,
                *ln,
                "expected 6 tensor components (xx yy zz xy yz xz)",
            ));
        };
        let mut t = [0.0; 6];
        for (k, v) in vals.iter().enumerate() {
            t[k] = v
                .parse()
                .map_err(|_| parse_err(&tensor_path, *ln, "bad tensor component"))?;
        }
        tensors.push(t);
    }

    Ok(TensorMeshDataset {
        vertices,
        tets,
        tensors,
        metadata: Some(serde_json::json!({"source": "tetgen"})),
    })
}

// ---------------------------------------------------------------------------
// Surface output
// ---------------------------------------------------------------------------

/// Surface output formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceFormat {
    /// Wavefront OBJ plus a JSON sidecar (`<path>.attributes.json`).
    ObjJson,
    /// Binary little-endian PLY with custom per-vertex properties.
    Ply,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjSidecar {
    mode_sign: Vec<i8>,
    normal: Vec<[f32; 3]>,
    k1: Vec<f32>,
    k2: Vec<f32>,
    dir1: Vec<[f32; 3]>,
    dir2: Vec<[f32; 3]>,
}

pub fn save_surface(mesh: &ModeSurfaceMesh, path: &Path, format: SurfaceFormat) -> Result<()> {
    match format {
        SurfaceFormat::ObjJson => save_obj(mesh, path),
        SurfaceFormat::Ply => save_ply(mesh, path),
    }
}

fn save_obj(mesh: &ModeSurfaceMesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {:.17} {:.17} {:.17}", v.position.x, v.position.y, v.position.z)?;
    }
    for v in &mesh.vertices {
        writeln!(w, "vn {:.9} {:.9} {:.9}", v.normal.x, v.normal.y, v.normal.z)?;
    }
    for t in &mesh.triangles {
        writeln!(
            w,
            "f {}//{} {}//{} {}//{}",
            t[0] + 1,
            t[0] + 1,
            t[1] + 1,
            t[1] + 1,
            t[2] + 1,
            t[2] + 1
        )?;
    }
    drop(w);
    let sidecar = ObjSidecar {
        mode_sign: mesh.vertices.iter().map(|v| v.sign).collect(),
        normal: mesh
            .vertices
            .iter()
            .map(|v| [v.normal.x as f32, v.normal.y as f32, v.normal.z as f32])
            .collect(),
        k1: mesh.vertices.iter().map(|v| v.k1 as f32).collect(),
        k2: mesh.vertices.iter().map(|v| v.k2 as f32).collect(),
        dir1: mesh
            .vertices
            .iter()
            .map(|v| [v.dir1.x as f32, v.dir1.y as f32, v.dir1.z as f32])
            .collect(),
        dir2: mesh
            .vertices
            .iter()
            .map(|v| [v.dir2.x as f32, v.dir2.y as f32, v.dir2.z as f32])
            .collect(),
    };
    let sidecar_path = path.with_extension("attributes.json");
    let f = std::fs::File::create(sidecar_path)?;
    serde_json::to_writer(BufWriter::new(f), &sidecar)
        .map_err(|e| Error::IoError(std::io::Error::other(e)))?;
    Ok(())
}

fn save_ply(mesh: &ModeSurfaceMesh, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\n\
         element vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property char mode_sign\n\
         property float nx\nproperty float ny\nproperty float nz\n\
         property float k1\nproperty float k2\n\
         property float d1x\nproperty float d1y\nproperty float d1z\n\
         property float d2x\nproperty float d2y\nproperty float d2z\n\
         element face {}\n\
         property list uchar uint vertex_indices\n\
         end_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        for c in [v.position.x, v.position.y, v.position.z] {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&[v.sign as u8])?;
        for c in [v.normal.x, v.normal.y, v.normal.z] {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
        w.write_all(&(v.k1 as f32).to_le_bytes())?;
        w.write_all(&(v.k2 as f32).to_le_bytes())?;
        for c in [v.dir1.x, v.dir1.y, v.dir1.z, v.dir2.x, v.dir2.y, v.dir2.z] {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        w.write_all(&[3u8])?;
        for &i in t {
            w.write_all(&(i as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads positions and triangles back from a binary PLY written by
/// [`save_surface`]; used by round-trip checks and the oracle comparison.
pub fn load_ply_geometry(path: &Path) -> Result<(Vec<Vector3<f64>>, Vec<[usize; 3]>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| parse_err(path, 1, "missing end_header"))?
        + 11;
    let header = String::from_utf8_lossy(&bytes[..header_end]);
    let mut nv = 0usize;
    let mut nf = 0usize;
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            nv = rest.trim().parse().map_err(|_| parse_err(path, 1, "bad vertex count"))?;
        }
        if let Some(rest) = line.strip_prefix("element face ") {
            nf = rest.trim().parse().map_err(|_| parse_err(path, 1, "bad face count"))?;
        }
    }
    let stride = 3 * 8 + 1 + 3 * 4 + 2 * 4 + 6 * 4;
    let mut off = header_end;
    let mut verts = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut c = [0.0f64; 3];
        for (k, slot) in c.iter_mut().enumerate() {
            let s = off + k * 8;
            *slot = f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap());
        }
        verts.push(Vector3::from_column_slice(&c));
        off += stride;
    }
    let mut tris = Vec::with_capacity(nf);
    for _ in 0..nf {
        let cnt = bytes[off];
        off += 1;
        if cnt != 3 {
            return Err(parse_err(path, 1, "non-triangle face in PLY"));
        }
        let mut t = [0usize; 3];
        for slot in t.iter_mut() {
            *slot = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
        }
        tris.push(t);
    }
    Ok((verts, tris))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_dataset() -> TensorMeshDataset {
        TensorMeshDataset {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            tets: vec![[0, 1, 2, 3]],
            tensors: vec![[1.0, 0.0, -1.0, 0.1, 0.2, 0.3]; 4],
            metadata: None,
        }
    }

    #[test]
    fn minimal_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("min.json");
        let mut ds = minimal_dataset();
        ds.validate().unwrap();
        save_dataset(&ds, &path).unwrap();
        let ds2 = load_dataset(&path, DatasetFormat::Json).unwrap();
        assert_eq!(ds.vertices, ds2.vertices);
        assert_eq!(ds.tets, ds2.tets);
        assert_eq!(ds.tensors, ds2.tensors);
    }

    #[test]
    fn mismatched_tensor_count_rejected() {
        let mut ds = minimal_dataset();
        ds.tensors.pop();
        assert!(matches!(ds.validate(), Err(Error::ValidationError(_))));
    }

    #[test]
    fn nan_rejected() {
        let mut ds = minimal_dataset();
        ds.tensors[1][3] = f64::NAN;
        match ds.validate() {
            Err(Error::ValidationError(msgs)) => {
                assert!(msgs.iter().any(|m| m.contains("tensor 1")));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn deviator_projection_warns() {
        let mut ds = minimal_dataset();
        ds.tensors[0] = [2.0, 1.0, 1.0, 0.0, 0.0, 0.0]; // trace 4
        let warnings = ds.validate().unwrap();
        assert!(!warnings.is_empty());
        let s: f64 = ds.tensors[0][0] + ds.tensors[0][1] + ds.tensors[0][2];
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn tetgen_pair_loads() {
        let dir = tempfile::tempdir().unwrap();
        let node = dir.path().join("m.node");
        std::fs::write(
            &node,
            "# comment\n4 3 0 0\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("m.ele"), "1 4 0\n1 1 2 3 4\n").unwrap();
        std::fs::write(
            dir.path().join("m.tensor"),
            "4\n1 1 0 -1 0 0 0\n2 1 0 -1 0 0 0\n3 1 0 -1 0 0 0\n4 1 0 -1 0 0 0\n",
        )
        .unwrap();
        let ds = load_dataset(&node, DatasetFormat::Tetgen).unwrap();
        assert_eq!(ds.vertices.len(), 4);
        assert_eq!(ds.tets, vec![[0, 1, 2, 3]]);
        assert_eq!(ds.tensors.len(), 4);
    }
}
