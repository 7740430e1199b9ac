//! Tetrahedral mesh connectivity derived from a vertex/tet soup: canonical
//! edge and face tables, adjacency, and barycentric queries.

use crate::error::{Error, Result};
use crate::tensor::SymTensor3;
use nalgebra::{Matrix3, Vector3, Vector4};
use std::collections::HashMap;

/// Barycentric containment tolerance for lifted vertices.
pub const BARY_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct TetMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub tensors: Vec<SymTensor3>,
    pub tets: Vec<[usize; 4]>,
    /// Sorted vertex pairs, ordered lexicographically.
    pub edges: Vec<[usize; 2]>,
    /// Sorted vertex triples, ordered lexicographically.
    pub faces: Vec<[usize; 3]>,
    /// Edge ids of each face (edge k joins sorted-triple vertices k and
    /// k+1 mod 3; the last entry joins vertices 0 and 2).
    pub face_edges: Vec<[usize; 3]>,
    /// Face ids of each tet.
    pub tet_faces: Vec<[usize; 4]>,
    /// Tets adjacent to each face (one on the domain boundary).
    pub face_tets: Vec<(usize, Option<usize>)>,
    pub bbox_min: Vector3<f64>,
    pub bbox_max: Vector3<f64>,
}

impl TetMesh {
    pub fn build(
        vertices: Vec<Vector3<f64>>,
        tensors: Vec<SymTensor3>,
        tets: Vec<[usize; 4]>,
    ) -> Result<Self> {
        if tensors.len() != vertices.len() {
            return Err(Error::ValidationError(vec![format!(
                "tensor count {} != vertex count {}",
                tensors.len(),
                vertices.len()
            )]));
        }
        let mut edge_keys: Vec<[usize; 2]> = Vec::with_capacity(tets.len() * 6);
        let mut face_keys: Vec<[usize; 3]> = Vec::with_capacity(tets.len() * 4);
        for t in &tets {
            for i in 0..4 {
                for j in (i + 1)..4 {
                    edge_keys.push(sorted2(t[i], t[j]));
                }
                let mut f = [t[(i + 1) % 4], t[(i + 2) % 4], t[(i + 3) % 4]];
                f.sort_unstable();
                face_keys.push(f);
            }
        }
        edge_keys.sort_unstable();
        edge_keys.dedup();
        face_keys.sort_unstable();
        face_keys.dedup();
        let edge_ids: HashMap<[usize; 2], usize> = edge_keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i))
            .collect();
        let face_ids: HashMap<[usize; 3], usize> = face_keys
            .iter()
            .enumerate()
            .map(|(i, &k)| (k, i))
            .collect();

        let mut face_tets: Vec<(usize, Option<usize>)> = vec![(usize::MAX, None); face_keys.len()];
        let mut tet_faces = vec![[0usize; 4]; tets.len()];
        for (ti, t) in tets.iter().enumerate() {
            for i in 0..4 {
                let mut f = [t[(i + 1) % 4], t[(i + 2) % 4], t[(i + 3) % 4]];
                f.sort_unstable();
                let fid = face_ids[&f];
                tet_faces[ti][i] = fid;
                let slot = &mut face_tets[fid];
                if slot.0 == usize::MAX {
                    slot.0 = ti;
                } else {
                    slot.1 = Some(ti);
                }
            }
        }
        let face_edges: Vec<[usize; 3]> = face_keys
            .iter()
            .map(|f| {
                [
                    edge_ids[&sorted2(f[0], f[1])],
                    edge_ids[&sorted2(f[1], f[2])],
                    edge_ids[&sorted2(f[0], f[2])],
                ]
            })
            .collect();

        let mut bbox_min = Vector3::repeat(f64::INFINITY);
        let mut bbox_max = Vector3::repeat(f64::NEG_INFINITY);
        for v in &vertices {
            bbox_min = bbox_min.inf(v);
            bbox_max = bbox_max.sup(v);
        }

        Ok(TetMesh {
            vertices,
            tensors,
            tets,
            edges: edge_keys,
            faces: face_keys,
            face_edges,
            tet_faces,
            face_tets,
            bbox_min,
            bbox_max,
        })
    }

    pub fn bbox_diagonal(&self) -> f64 {
        (self.bbox_max - self.bbox_min).norm()
    }

    pub fn tet_positions(&self, tet: usize) -> [Vector3<f64>; 4] {
        let t = self.tets[tet];
        [
            self.vertices[t[0]],
            self.vertices[t[1]],
            self.vertices[t[2]],
            self.vertices[t[3]],
        ]
    }

    pub fn tet_tensors(&self, tet: usize) -> [SymTensor3; 4] {
        let t = self.tets[tet];
        [
            self.tensors[t[0]],
            self.tensors[t[1]],
            self.tensors[t[2]],
            self.tensors[t[3]],
        ]
    }

    pub fn face_positions(&self, face: usize) -> [Vector3<f64>; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0]],
            self.vertices[f[1]],
            self.vertices[f[2]],
        ]
    }

    pub fn face_tensors(&self, face: usize) -> [SymTensor3; 3] {
        let f = self.faces[face];
        [self.tensors[f[0]], self.tensors[f[1]], self.tensors[f[2]]]
    }

    pub fn tet_volume(&self, tet: usize) -> f64 {
        let p = self.tet_positions(tet);
        ((p[1] - p[0]).cross(&(p[2] - p[0]))).dot(&(p[3] - p[0])) / 6.0
    }

    pub fn barycentric(&self, tet: usize, p: &Vector3<f64>) -> Vector4<f64> {
        let v = self.tet_positions(tet);
        barycentric_of(&v, p)
    }

    pub fn tet_contains(&self, tet: usize, p: &Vector3<f64>, tol: f64) -> bool {
        self.barycentric(tet, p).min() >= -tol
    }
}

pub fn sorted2(a: usize, b: usize) -> [usize; 2] {
    if a <= b {
        [a, b]
    } else {
        [b, a]
    }
}

pub fn barycentric_of(v: &[Vector3<f64>; 4], p: &Vector3<f64>) -> Vector4<f64> {
    let m = Matrix3::from_columns(&[v[1] - v[0], v[2] - v[0], v[3] - v[0]]);
    match m.lu().solve(&(p - v[0])) {
        Some(c) => Vector4::new(1.0 - c.x - c.y - c.z, c.x, c.y, c.z),
        None => Vector4::new(f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tet_mesh() -> TetMesh {
        let vs = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let t = SymTensor3::from_diagonal([1.0, 0.0, -1.0]);
        TetMesh::build(vs.clone(), vec![t; vs.len()], vec![[0, 1, 2, 3], [1, 2, 3, 4]])
            .unwrap()
    }

    #[test]
    fn connectivity_counts() {
        let m = two_tet_mesh();
        assert_eq!(m.faces.len(), 7);
        assert_eq!(m.edges.len(), 9);
        let shared = m.face_tets.iter().filter(|(_, b)| b.is_some()).count();
        assert_eq!(shared, 1);
        for (ti, fs) in m.tet_faces.iter().enumerate() {
            for f in fs {
                let (a, b) = m.face_tets[*f];
                assert!(a == ti || b == Some(ti));
            }
        }
    }

    #[test]
    fn barycentric_roundtrip() {
        let m = two_tet_mesh();
        let p = Vector3::new(0.2, 0.3, 0.1);
        let b = m.barycentric(0, &p);
        assert!((b.sum() - 1.0).abs() < 1e-12);
        let v = m.tet_positions(0);
        let rec = v[0] * b[0] + v[1] * b[1] + v[2] * b[2] + v[3] * b[3];
        assert!((rec - p).norm() < 1e-12);
        assert!(m.tet_contains(0, &p, 0.0));
        assert!(!m.tet_contains(0, &Vector3::new(2.0, 2.0, 2.0), BARY_TOL));
    }
}
