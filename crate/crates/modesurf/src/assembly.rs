//! Global stitching of per-tet patches into one seamless indexed mesh,
//! analytic differential properties (normals, principal curvatures from the
//! mode Hessian), and topological verification.

use crate::cell::{TetPatch, VertexKey};
use crate::error::{Error, Result};
use crate::field::LinearTensorField;
use crate::mesh::TetMesh;
use crate::tensor::SymTensor3;
use nalgebra::{Matrix3, Vector3};
use std::collections::HashMap;

/// Gradient magnitude below which curvature is marked invalid.
pub const GRADIENT_VANISH_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct SurfaceVertex {
    pub position: Vector3<f64>,
    pub key: VertexKey,
    pub tensor: SymTensor3,
    /// +1 on the +μ sheet, −1 on the −μ sheet, 0 on neutral surfaces.
    pub sign: i8,
    pub normal: Vector3<f64>,
    pub k1: f64,
    pub k2: f64,
    pub dir1: Vector3<f64>,
    pub dir2: Vector3<f64>,
    pub curvature_valid: bool,
}

#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub vertices: usize,
    pub edges: usize,
    pub triangles: usize,
    pub euler_characteristic: i64,
    pub closed: bool,
    pub orientable: bool,
    /// Genus for closed orientable components.
    pub genus: Option<i64>,
    /// Sign profile: (has +μ vertices, has −μ vertices).
    pub signs: (bool, bool),
}

/// Seamless indexed triangle mesh of a generalized mode surface.
#[derive(Debug, Clone, Default)]
pub struct ModeSurfaceMesh {
    pub vertices: Vec<SurfaceVertex>,
    pub triangles: Vec<[usize; 3]>,
    pub mu: f64,
}

impl ModeSurfaceMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Sorted unique edge list as vertex-index pairs.
    pub fn edge_list(&self) -> Vec<[usize; 2]> {
        let mut edges: Vec<[usize; 2]> = Vec::with_capacity(self.triangles.len() * 3);
        for t in &self.triangles {
            for k in 0..3 {
                edges.push(crate::mesh::sorted2(t[k], t[(k + 1) % 3]));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Incidence count per undirected edge.
    pub fn edge_triangle_counts(&self) -> HashMap<[usize; 2], usize> {
        let mut counts: HashMap<[usize; 2], usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *counts
                    .entry(crate::mesh::sorted2(t[k], t[(k + 1) % 3]))
                    .or_insert(0) += 1;
            }
        }
        counts
    }

    /// Edges with more than two incident triangles.
    pub fn nonmanifold_edges(&self) -> Vec<[usize; 2]> {
        let mut bad: Vec<[usize; 2]> = self
            .edge_triangle_counts()
            .into_iter()
            .filter(|(_, c)| *c > 2)
            .map(|(e, _)| e)
            .collect();
        bad.sort_unstable();
        bad
    }

    /// Vertices sharing an identical stitch key (should be none).
    pub fn duplicate_key_count(&self) -> usize {
        let mut keys: Vec<&VertexKey> = self.vertices.iter().map(|v| &v.key).collect();
        keys.sort();
        let before = keys.len();
        keys.dedup();
        before - keys.len()
    }
}

/// Merge per-tet patches into one indexed mesh. Vertices are merged by
/// exact source key with zero geometric tolerance; boundary polylines of
/// patches meeting across an interior mesh face must agree key-for-key or
/// the merge fails with [`Error::SeamDetected`].
pub fn stitch(patches: &[TetPatch], mesh: &TetMesh, mu: f64) -> Result<ModeSurfaceMesh> {
    let mut key_to_index: HashMap<VertexKey, usize> = HashMap::new();
    let mut vertices: Vec<SurfaceVertex> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();

    for patch in patches {
        let mut local: Vec<usize> = Vec::with_capacity(patch.vertices.len());
        for pv in &patch.vertices {
            let idx = match key_to_index.get(&pv.key) {
                Some(&i) => {
                    let existing = &vertices[i];
                    if (existing.position - pv.position).norm() != 0.0 {
                        return Err(Error::SeamDetected(format!(
                            "key {:?} carries distinct positions across patches",
                            pv.key
                        )));
                    }
                    i
                }
                None => {
                    let i = vertices.len();
                    key_to_index.insert(pv.key, i);
                    vertices.push(SurfaceVertex {
                        position: pv.position,
                        key: pv.key,
                        tensor: pv.tensor,
                        sign: pv.sign,
                        normal: Vector3::zeros(),
                        k1: 0.0,
                        k2: 0.0,
                        dir1: Vector3::zeros(),
                        dir2: Vector3::zeros(),
                        curvature_valid: false,
                    });
                    i
                }
            };
            local.push(idx);
        }
        for t in &patch.triangles {
            let tri = [local[t[0]], local[t[1]], local[t[2]]];
            if tri[0] != tri[1] && tri[1] != tri[2] && tri[0] != tri[2] {
                triangles.push(tri);
            }
        }
    }

    // Seam audit: for every interior mesh face, both adjacent patches must
    // reference the same face-curve vertex key set.
    let mut face_usage: HashMap<usize, [Vec<VertexKey>; 2]> = HashMap::new();
    for patch in patches {
        for pv in &patch.vertices {
            let face = match pv.key {
                VertexKey::FaceCurve { face, .. } => face,
                _ => continue,
            };
            let (t0, t1) = mesh.face_tets[face];
            let side = if t0 == patch.tet {
                0
            } else if t1 == Some(patch.tet) {
                1
            } else {
                continue;
            };
            face_usage.entry(face).or_default()[side].push(pv.key);
        }
    }
    for (face, mut usage) in face_usage {
        if mesh.face_tets[face].1.is_none() {
            continue; // domain boundary: single-sided by construction
        }
        usage[0].sort();
        usage[0].dedup();
        usage[1].sort();
        usage[1].dedup();
        if usage[0] != usage[1] {
            return Err(Error::SeamDetected(format!(
                "face {face}: {} vs {} boundary vertices across the shared face",
                usage[0].len(),
                usage[1].len()
            )));
        }
    }

    Ok(ModeSurfaceMesh {
        vertices,
        triangles,
        mu,
    })
}

/// Per-tet linear fields used for analytic evaluation at surface vertices.
pub struct FieldTable<'a> {
    mesh: &'a TetMesh,
    fields: Vec<Option<LinearTensorField>>,
}

impl<'a> FieldTable<'a> {
    pub fn new(mesh: &'a TetMesh) -> Self {
        FieldTable {
            mesh,
            fields: vec![None; mesh.tets.len()],
        }
    }

    pub fn get(&mut self, tet: usize) -> Result<&LinearTensorField> {
        if self.fields[tet].is_none() {
            let f = LinearTensorField::from_tet(
                &self.mesh.tet_positions(tet),
                &self.mesh.tet_tensors(tet),
            )?;
            self.fields[tet] = Some(f);
        }
        Ok(self.fields[tet].as_ref().unwrap())
    }
}

/// Locate a tet containing the point for analytic evaluation. Vertices on
/// shared faces may belong to several tets; any of them evaluates to the
/// same tensor, and the mode Hessian differs only by the (C0) cell choice —
/// the owning tet is passed by the extraction for interior vertices.
fn containing_tet(mesh: &TetMesh, key: &VertexKey, p: &Vector3<f64>) -> Option<usize> {
    match key {
        VertexKey::Arc { tet, .. } | VertexKey::Interior { tet, .. } => Some(*tet),
        VertexKey::FaceCurve { face, .. } => Some(mesh.face_tets[*face].0),
        VertexKey::EdgeRoot { .. } | VertexKey::SingularPoint { .. } => {
            (0..mesh.tets.len()).find(|&t| mesh.tet_contains(t, p, crate::mesh::BARY_TOL))
        }
    }
}

/// Fill per-vertex normals and principal curvatures from the analytic mode
/// gradient and Hessian of the owning cell's linear field. The normal is
/// oriented along +∇mode on +μ sheets and −∇mode on −μ sheets. Near
/// critical points (vanishing gradient) curvature is marked invalid.
pub fn differentials(surface: &mut ModeSurfaceMesh, mesh: &TetMesh) -> Result<()> {
    let mut fields = FieldTable::new(mesh);
    let scale = mesh.bbox_diagonal().max(f64::MIN_POSITIVE);
    for v in surface.vertices.iter_mut() {
        let Some(tet) = containing_tet(mesh, &v.key, &v.position) else {
            v.curvature_valid = false;
            continue;
        };
        let field = fields.get(tet)?;
        let g = field.mode_gradient(&v.position);
        let gn = g.norm();
        if gn < GRADIENT_VANISH_TOL / scale {
            v.curvature_valid = false;
            continue;
        }
        let orient = if v.sign < 0 { -1.0 } else { 1.0 };
        let n = g / gn * orient;
        v.normal = n;
        // Shape operator S = −P H P / ‖∇mode‖ on the tangent plane.
        let h = field.mode_hessian(&v.position);
        let t1 = crate::tensor::smallest_axis_tangent(&n);
        let t2 = n.cross(&t1);
        let s11 = -(t1.dot(&(h * t1))) / gn * orient;
        let s12 = -(t1.dot(&(h * t2))) / gn * orient;
        let s22 = -(t2.dot(&(h * t2))) / gn * orient;
        let tr = s11 + s22;
        let det = s11 * s22 - s12 * s12;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let (k1, k2) = (tr / 2.0 + disc, tr / 2.0 - disc);
        let angle = 0.5 * (2.0 * s12).atan2(s11 - s22);
        let d1 = t1 * angle.cos() + t2 * angle.sin();
        let d2 = n.cross(&d1);
        v.k1 = k1;
        v.k2 = k2;
        v.dir1 = d1;
        v.dir2 = d2;
        v.curvature_valid = true;
    }
    Ok(())
}

/// Connected components with Euler characteristic, orientability (by
/// orientation propagation) and genus for closed orientable components.
/// Domain-boundary edges are tagged open rather than capped; genus is only
/// reported for closed components.
pub fn topology_report(surface: &ModeSurfaceMesh) -> Vec<ComponentReport> {
    let nv = surface.vertices.len();
    let mut parent: Vec<usize> = (0..nv).collect();
    fn find(parent: &mut Vec<usize>, mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    for t in &surface.triangles {
        for k in 0..3 {
            let (a, b) = (find(&mut parent, t[k]), find(&mut parent, t[(k + 1) % 3]));
            if a != b {
                parent[a] = b;
            }
        }
    }
    // Group triangles per component.
    let mut comp_tris: HashMap<usize, Vec<usize>> = HashMap::new();
    for (ti, t) in surface.triangles.iter().enumerate() {
        let root = find(&mut parent, t[0]);
        comp_tris.entry(root).or_default().push(ti);
    }
    let mut roots: Vec<usize> = comp_tris.keys().copied().collect();
    roots.sort_unstable();

    let mut out = Vec::new();
    for root in roots {
        let tris = &comp_tris[&root];
        let mut vset: Vec<usize> = tris
            .iter()
            .flat_map(|&ti| surface.triangles[ti])
            .collect();
        vset.sort_unstable();
        vset.dedup();
        let mut edges: Vec<[usize; 2]> = Vec::with_capacity(tris.len() * 3);
        for &ti in tris {
            let t = surface.triangles[ti];
            for k in 0..3 {
                edges.push(crate::mesh::sorted2(t[k], t[(k + 1) % 3]));
            }
        }
        edges.sort_unstable();
        let mut edge_counts: Vec<([usize; 2], usize)> = Vec::new();
        for e in edges {
            match edge_counts.last_mut() {
                Some((last, c)) if *last == e => *c += 1,
                _ => edge_counts.push((e, 1)),
            }
        }
        let ne = edge_counts.len();
        let closed = edge_counts.iter().all(|(_, c)| *c == 2);
        let chi = vset.len() as i64 - ne as i64 + tris.len() as i64;

        // Orientability: propagate orientation across shared edges.
        let mut edge_to_tris: HashMap<[usize; 2], Vec<usize>> = HashMap::new();
        for &ti in tris {
            let t = surface.triangles[ti];
            for k in 0..3 {
                edge_to_tris
                    .entry(crate::mesh::sorted2(t[k], t[(k + 1) % 3]))
                    .or_default()
                    .push(ti);
            }
        }
        let mut orient: HashMap<usize, bool> = HashMap::new();
        let mut orientable = true;
        let mut stack = vec![tris[0]];
        orient.insert(tris[0], true);
        while let Some(ti) = stack.pop() {
            let flip_i = orient[&ti];
            let t = surface.triangles[ti];
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let e = crate::mesh::sorted2(a, b);
                for &tj in &edge_to_tris[&e] {
                    if tj == ti {
                        continue;
                    }
                    let u = surface.triangles[tj];
                    // Directed edge occurrence in tj.
                    let mut same_direction = false;
                    for m in 0..3 {
                        if u[m] == a && u[(m + 1) % 3] == b {
                            same_direction = true;
                        }
                    }
                    // Consistent orientation means opposite directed edges.
                    let flip_j_needed = if same_direction { !flip_i } else { flip_i };
                    match orient.get(&tj) {
                        Some(&f) => {
                            if f != flip_j_needed {
                                orientable = false;
                            }
                        }
                        None => {
                            orient.insert(tj, flip_j_needed);
                            stack.push(tj);
                        }
                    }
                }
            }
        }

        let mut has_pos = false;
        let mut has_neg = false;
        for &vi in &vset {
            match surface.vertices[vi].sign {
                1 => has_pos = true,
                -1 => has_neg = true,
                _ => {}
            }
        }
        let genus = if closed && orientable {
            Some((2 - chi) / 2)
        } else {
            None
        };
        out.push(ComponentReport {
            vertices: vset.len(),
            edges: ne,
            triangles: tris.len(),
            euler_characteristic: chi,
            closed,
            orientable,
            genus,
            signs: (has_pos, has_neg),
        });
    }
    out
}

/// Mean-curvature cross-check: cotangent-weighted discrete mean curvature
/// at interior vertices of a (sufficiently refined) patch.
pub fn discrete_mean_curvature(surface: &ModeSurfaceMesh) -> HashMap<usize, f64> {
    let nv = surface.vertices.len();
    let mut lap: Vec<Vector3<f64>> = vec![Vector3::zeros(); nv];
    let mut area: Vec<f64> = vec![0.0; nv];
    let mut boundary: Vec<bool> = vec![false; nv];
    let counts = surface.edge_triangle_counts();
    for (e, c) in &counts {
        if *c == 1 {
            boundary[e[0]] = true;
            boundary[e[1]] = true;
        }
    }
    for t in &surface.triangles {
        let p: Vec<Vector3<f64>> = t.iter().map(|&i| surface.vertices[i].position).collect();
        let a2 = (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
        for k in 0..3 {
            let (i, j, o) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
            let (pi, pj, po) = (
                surface.vertices[i].position,
                surface.vertices[j].position,
                surface.vertices[o].position,
            );
            // cotangent at the opposite vertex o for edge (i, j)
            let u = pi - po;
            let v = pj - po;
            let cot = u.dot(&v) / u.cross(&v).norm().max(1e-300);
            lap[i] += (pj - pi) * (0.5 * cot);
            lap[j] += (pi - pj) * (0.5 * cot);
            area[t[k]] += a2 / 6.0;
        }
    }
    let mut out = HashMap::new();
    for i in 0..nv {
        if boundary[i] || area[i] < 1e-300 {
            continue;
        }
        let hn = lap[i] / (2.0 * area[i]);
        // Signed by the analytic normal.
        let sign = -hn.dot(&surface.vertices[i].normal).signum();
        // Mean curvature convention: H = (k1 + k2) / 2.
        out.insert(i, -0.5 * hn.norm() * sign);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn icosahedron() -> ModeSurfaceMesh {
        let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
        let raw = [
            (-1.0, phi, 0.0),
            (1.0, phi, 0.0),
            (-1.0, -phi, 0.0),
            (1.0, -phi, 0.0),
            (0.0, -1.0, phi),
            (0.0, 1.0, phi),
            (0.0, -1.0, -phi),
            (0.0, 1.0, -phi),
            (phi, 0.0, -1.0),
            (phi, 0.0, 1.0),
            (-phi, 0.0, -1.0),
            (-phi, 0.0, 1.0),
        ];
        let tris: [[usize; 3]; 20] = [
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let vertices = raw
            .iter()
            .enumerate()
            .map(|(i, &(x, y, z))| SurfaceVertex {
                position: Vector3::new(x, y, z),
                key: VertexKey::Interior { tet: 0, idx: i },
                tensor: SymTensor3::ZERO,
                sign: 1,
                normal: Vector3::new(x, y, z).normalize(),
                k1: 0.0,
                k2: 0.0,
                dir1: Vector3::zeros(),
                dir2: Vector3::zeros(),
                curvature_valid: false,
            })
            .collect();
        ModeSurfaceMesh {
            vertices,
            triangles: tris.to_vec(),
            mu: 0.5,
        }
    }

    #[test]
    fn icosahedron_topology() {
        let m = icosahedron();
        let reports = topology_report(&m);
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert_eq!(r.euler_characteristic, 2);
        assert!(r.closed);
        assert!(r.orientable);
        assert_eq!(r.genus, Some(0));
        assert!(m.nonmanifold_edges().is_empty());
        assert_eq!(m.duplicate_key_count(), 0);
    }

    #[test]
    fn torus_grid_topology() {
        // n x m torus grid built directly.
        let (n, m) = (12usize, 8usize);
        let mut vertices = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let (a, b) = (
                    2.0 * std::f64::consts::PI * i as f64 / n as f64,
                    2.0 * std::f64::consts::PI * j as f64 / m as f64,
                );
                let r = 2.0 + 0.5 * b.cos();
                vertices.push(SurfaceVertex {
                    position: Vector3::new(r * a.cos(), r * a.sin(), 0.5 * b.sin()),
                    key: VertexKey::Interior {
                        tet: 0,
                        idx: i * m + j,
                    },
                    tensor: SymTensor3::ZERO,
                    sign: 1,
                    normal: Vector3::z(),
                    k1: 0.0,
                    k2: 0.0,
                    dir1: Vector3::zeros(),
                    dir2: Vector3::zeros(),
                    curvature_valid: false,
                });
            }
        }
        let mut triangles = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let v00 = i * m + j;
                let v10 = ((i + 1) % n) * m + j;
                let v01 = i * m + (j + 1) % m;
                let v11 = ((i + 1) % n) * m + (j + 1) % m;
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        let mesh = ModeSurfaceMesh {
            vertices,
            triangles,
            mu: 0.5,
        };
        let r = &topology_report(&mesh)[0];
        assert_eq!(r.euler_characteristic, 0);
        assert!(r.closed);
        assert!(r.orientable);
        assert_eq!(r.genus, Some(1));
    }

    #[test]
    fn moebius_is_nonorientable() {
        let n = 16usize;
        let mut vertices = Vec::new();
        for i in 0..n {
            for j in 0..2 {
                let a = std::f64::consts::PI * i as f64 / n as f64; // half twist
                let w = if j == 0 { -0.3 } else { 0.3 };
                let r = 2.0 + w * (a).cos();
                vertices.push(SurfaceVertex {
                    position: Vector3::new(
                        r * (2.0 * a).cos(),
                        r * (2.0 * a).sin(),
                        w * a.sin(),
                    ),
                    key: VertexKey::Interior {
                        tet: 0,
                        idx: i * 2 + j,
                    },
                    tensor: SymTensor3::ZERO,
                    sign: 0,
                    normal: Vector3::z(),
                    k1: 0.0,
                    k2: 0.0,
                    dir1: Vector3::zeros(),
                    dir2: Vector3::zeros(),
                    curvature_valid: false,
                });
            }
        }
        let idx = |i: usize, j: usize| -> usize {
            if i < n {
                i * 2 + j
            } else {
                // glue with a flip
                (1 - j)
            }
        };
        let mut triangles = Vec::new();
        for i in 0..n {
            let (a0, b0) = (idx(i, 0), idx(i, 1));
            let (a1, b1) = (idx(i + 1, 0), idx(i + 1, 1));
            triangles.push([a0, a1, b1]);
            triangles.push([a0, b1, b0]);
        }
        let mesh = ModeSurfaceMesh {
            vertices,
            triangles,
            mu: 0.0,
        };
        let r = &topology_report(&mesh)[0];
        assert!(!r.orientable);
        assert!(!r.closed); // has the boundary circle
    }
}
