//! Per-tetrahedron mode-surface extraction: face curves assembled into
//! boundary loops, lifted to the medium eigenvector manifold, split at
//! complex-domain-boundary crossings, completed with boundary-arc segments,
//! triangulated on the sphere (stereographic constrained Delaunay) and
//! mapped back to space.

use crate::error::{Error, Result};
use crate::field::{
    self, boundary_arcs, lift_disambiguated, theta_from_mode, ArcSet, LinearTensorField,
};
use crate::mesh::{TetMesh, BARY_TOL};
use crate::plane::{
    edge_mode_roots, plane_critical_points, trace_level_curve, CriticalKind, PlaneField,
    TraceEnd, Tri2,
};
use crate::tensor::{eigen_decompose, SymTensor3};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};
use std::collections::HashMap;

/// Identity of a stitched surface vertex. Merging is by exact key equality;
/// every key carries bit-identical geometry wherever it appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VertexKey {
    /// Intersection of the surface with a mesh edge (shared by all faces
    /// and tets around the edge).
    EdgeRoot { edge: usize, root: usize },
    /// Interior vertex of a face curve (shared by the two adjacent tets).
    FaceCurve { face: usize, curve: usize, idx: usize },
    /// Sample on a complex-domain boundary arc (interior to one tet,
    /// shared between the antipodal twin polylines).
    Arc { tet: usize, loop_id: usize, idx: usize },
    /// Region-interior sample of one tet.
    Interior { tet: usize, idx: usize },
    /// Endpoint of a neutral singular segment on a face.
    SingularPoint { line: usize, face: usize },
}

/// Surface/edge intersection.
#[derive(Debug, Clone, Copy)]
pub struct EdgeRootPoint {
    pub t: f64,
    pub sign: i8,
    pub position: Vector3<f64>,
    pub tensor: SymTensor3,
}

#[derive(Debug, Clone)]
pub struct FaceCurveVertex {
    pub xy: Vector2<f64>,
    pub position: Vector3<f64>,
    pub tensor: SymTensor3,
    pub key: VertexKey,
}

#[derive(Debug, Clone)]
pub struct FaceCurve {
    pub face: usize,
    pub index: usize,
    /// +1, −1 for the two mode sheets; 0 for neutral curves.
    pub sign: i8,
    pub closed: bool,
    pub vertices: Vec<FaceCurveVertex>,
}

#[derive(Debug, Clone)]
pub struct FaceData {
    pub plane: PlaneField,
    pub tri: Tri2,
    pub curves: Vec<FaceCurve>,
}

/// A neutral singular line clipped to a tet: endpoints on two faces.
#[derive(Debug, Clone)]
pub struct SingularSegment {
    pub tet: usize,
    pub line: usize,
    pub direction_on_manifold: Vector3<f64>,
    pub endpoints: [Vector3<f64>; 2],
}

#[derive(Debug, Clone)]
pub struct PatchVertex {
    pub key: VertexKey,
    pub v2: Vector3<f64>,
    pub position: Vector3<f64>,
    pub tensor: SymTensor3,
    pub sign: i8,
    pub on_arc: bool,
    pub on_boundary: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TetPatch {
    pub tet: usize,
    pub vertices: Vec<PatchVertex>,
    pub triangles: Vec<[usize; 3]>,
    /// Minimum triangle angle (radians) of the boundary-only and the
    /// refined triangulation.
    pub min_angle_boundary_only: f64,
    pub min_angle_refined: f64,
}

/// Extraction options beyond the mode value.
#[derive(Debug, Clone)]
pub struct ExtractOptions {
    /// Target arc spacing for interior grid insertion, as a multiple of the
    /// median boundary sample spacing.
    pub interior_spacing_factor: f64,
    /// Skip the per-face critical-point solve when a face has no edge
    /// roots and a coarse scan shows no level crossing (faster, may miss
    /// interior loops hiding between scan samples).
    pub fast_loop_scan: bool,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            interior_spacing_factor: 1.0,
            fast_loop_scan: false,
        }
    }
}

#[derive(Debug)]
pub struct Extraction {
    pub mu: f64,
    pub neutral: bool,
    pub edge_roots: Vec<Vec<EdgeRootPoint>>,
    pub faces: Vec<FaceData>,
    pub patches: Vec<TetPatch>,
    pub singular_segments: Vec<SingularSegment>,
    /// Count of tets where the interior-component scan found members with
    /// no boundary to mesh them from (flagged, not meshed).
    pub unmeshed_interior_components: usize,
}

/// Extract the generalized mode-μ surface (or the neutral surface when
/// `neutral` is set) from a piecewise-linear tensor field.
pub fn extract(mesh: &TetMesh, mu: f64, neutral: bool, opts: &ExtractOptions) -> Result<Extraction> {
    if neutral {
        if mu != 0.0 {
            return Err(Error::DomainError(
                "neutral extraction fixes the mode value at 0".into(),
            ));
        }
    } else if !(0.0 < mu && mu < 1.0) {
        return Err(Error::DomainError(format!(
            "mode value {mu} outside (0, 1)"
        )));
    }

    // Per-tet linear fields up front; reject at the bifurcation.
    let fields: Vec<LinearTensorField> = mesh
        .tets
        .par_iter()
        .enumerate()
        .map(|(ti, _)| {
            LinearTensorField::from_tet(&mesh.tet_positions(ti), &mesh.tet_tensors(ti))
        })
        .collect::<Result<Vec<_>>>()?;
    if !neutral {
        for f in &fields {
            if (mu - f.bifurcation_mode()).abs() < field::BIFURCATION_TOL {
                return Err(Error::AtBifurcation(
                    (mu - f.bifurcation_mode()).abs(),
                ));
            }
        }
    }

    // Stage A: one root set per mesh edge.
    let edge_roots: Vec<Vec<EdgeRootPoint>> = mesh
        .edges
        .par_iter()
        .map(|&[a, b]| {
            let (ta, tb) = (mesh.tensors[a], mesh.tensors[b]);
            edge_mode_roots(&ta, &tb, mu)
                .into_iter()
                .map(|(t, sign)| EdgeRootPoint {
                    t,
                    sign,
                    position: mesh.vertices[a] * (1.0 - t) + mesh.vertices[b] * t,
                    tensor: ta.scale(1.0 - t).add(&tb.scale(t)),
                })
                .collect()
        })
        .collect();

    // Stage B: face curves (once per face, canonical orientation).
    let mut faces: Vec<FaceData> = mesh
        .faces
        .par_iter()
        .enumerate()
        .map(|(fi, _)| build_face_curves(mesh, fi, &edge_roots, mu, opts))
        .collect::<Result<Vec<_>>>()?;

    // Crossing detection, key assignment and patch building iterate: when
    // two boundary chains pass too close for their sampling (thin sliver
    // regions near tet edges), the involved shared curves are subdivided
    // and the affected stages rerun.
    const MAX_REFINE_PASSES: usize = 10;
    let mut pass = 0;
    loop {
        pass += 1;
        // Stage C: per-tet complex-boundary crossings on the shared curves.
        let crossing_lists: Vec<Vec<CrossingInsert>> = (0..mesh.tets.len())
            .into_par_iter()
            .map(|ti| detect_crossings(mesh, ti, &fields[ti], &faces, mu, neutral))
            .collect::<Result<Vec<_>>>()?;

        // Stage D: merge crossings into the shared curves, assign keys.
        let crossing_map = merge_crossings(&mut faces, &crossing_lists);

        // Stage E: per-tet patches (or refinement requests).
        let results: Vec<PatchOutcome> = (0..mesh.tets.len())
            .into_par_iter()
            .map(|ti| {
                build_patch(
                    mesh,
                    ti,
                    &fields[ti],
                    &faces,
                    &crossing_map,
                    mu,
                    neutral,
                    opts,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let mut requests: Vec<(usize, usize, usize)> = Vec::new();
        for r in &results {
            if let PatchOutcome::NeedsRefine(reqs) = r {
                requests.extend(reqs.iter().copied());
            }
        }
        if requests.is_empty() {
            let mut patches = Vec::with_capacity(results.len());
            let mut singular_segments = Vec::new();
            let mut unmeshed = 0usize;
            for r in results {
                let PatchOutcome::Done(p, segs, flagged) = r else {
                    unreachable!()
                };
                if flagged {
                    unmeshed += 1;
                }
                singular_segments.extend(segs);
                patches.push(p);
            }
            return Ok(Extraction {
                mu,
                neutral,
                edge_roots,
                faces,
                patches,
                singular_segments,
                unmeshed_interior_components: unmeshed,
            });
        }
        if pass >= MAX_REFINE_PASSES {
            return Err(Error::NonClosedBoundary(format!(
                "boundary chains still cross after {pass} refinement passes"
            )));
        }
        requests.sort_unstable();
        requests.dedup();
        apply_refinements(mesh, &mut faces, &requests, mu);
    }
}

enum PatchOutcome {
    Done(TetPatch, Vec<SingularSegment>, bool),
    /// Shared-curve segments (face, curve, vertex index) to subdivide.
    NeedsRefine(Vec<(usize, usize, usize)>),
}

fn merge_crossings(
    faces: &mut [FaceData],
    crossing_lists: &[Vec<CrossingInsert>],
) -> HashMap<(usize, usize, usize), Vec<CrossingOwner>> {
    let mut crossing_map: HashMap<(usize, usize, usize), Vec<CrossingOwner>> = HashMap::new();
    let mut per_curve: HashMap<(usize, usize), Vec<&CrossingInsert>> = HashMap::new();
    for list in crossing_lists {
        for c in list {
            per_curve.entry((c.face, c.curve)).or_default().push(c);
        }
    }
    let mut curve_keys: Vec<(usize, usize)> = per_curve.keys().copied().collect();
    curve_keys.sort_unstable();
    for key in curve_keys {
        let mut inserts = per_curve.remove(&key).unwrap();
        inserts.sort_by(|a, b| {
            (a.seg, a.s, a.tet)
                .partial_cmp(&(b.seg, b.s, b.tet))
                .unwrap()
        });
        let curve = &mut faces[key.0].curves[key.1];
        let mut grouped: Vec<(usize, f64, Vec<&CrossingInsert>)> = Vec::new();
        for ins in inserts {
            match grouped.last_mut() {
                Some((seg, s, owners)) if *seg == ins.seg && (*s - ins.s).abs() < 1e-9 => {
                    owners.push(ins);
                }
                _ => grouped.push((ins.seg, ins.s, vec![ins])),
            }
        }
        // Insert back-to-front so earlier segment indices stay valid.
        for (seg, _s, owners) in grouped.iter().rev() {
            let c0 = owners[0];
            if c0.snap_to_vertex.is_none() {
                curve.vertices.insert(
                    seg + 1,
                    FaceCurveVertex {
                        xy: c0.xy,
                        position: c0.position,
                        tensor: c0.tensor,
                        key: VertexKey::Interior { tet: 0, idx: 0 },
                    },
                );
            }
        }
        let (face, cidx) = key;
        for (i, v) in curve.vertices.iter_mut().enumerate() {
            if !matches!(v.key, VertexKey::EdgeRoot { .. }) {
                v.key = VertexKey::FaceCurve {
                    face,
                    curve: cidx,
                    idx: i,
                };
            }
        }
        let mut shift = 0usize;
        for (seg, _s, owners) in grouped.iter() {
            let final_idx = match owners[0].snap_to_vertex {
                Some(v) => {
                    // Count the non-snapped inserts placed before index v.
                    let before = grouped
                        .iter()
                        .filter(|(s2, _, o2)| o2[0].snap_to_vertex.is_none() && s2 + 1 <= v)
                        .count();
                    v + before
                }
                None => {
                    shift += 1;
                    seg + shift
                }
            };
            for o in owners {
                crossing_map
                    .entry((face, cidx, final_idx))
                    .or_default()
                    .push(CrossingOwner { tet: o.tet });
            }
        }
    }
    // Keys for curves untouched by crossings.
    for (fi, fd) in faces.iter_mut().enumerate() {
        for (ci, curve) in fd.curves.iter_mut().enumerate() {
            for (i, v) in curve.vertices.iter_mut().enumerate() {
                if matches!(v.key, VertexKey::Interior { .. }) {
                    v.key = VertexKey::FaceCurve {
                        face: fi,
                        curve: ci,
                        idx: i,
                    };
                }
            }
        }
    }
    crossing_map
}

/// Subdivide the requested shared-curve segments at their midpoints
/// (projected back onto the level curve).
fn apply_refinements(
    _mesh: &TetMesh,
    faces: &mut [FaceData],
    requests: &[(usize, usize, usize)],
    mu: f64,
) {
    // apply per curve, back-to-front
    let mut by_curve: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for &(f, c, i) in requests {
        by_curve.entry((f, c)).or_default().push(i);
    }
    let mut keys: Vec<(usize, usize)> = by_curve.keys().copied().collect();
    keys.sort_unstable();
    for (f, c) in keys {
        let mut idxs = by_curve.remove(&(f, c)).unwrap();
        idxs.sort_unstable();
        idxs.dedup();
        let fd = &mut faces[f];
        let curve = &mut fd.curves[c];
        let level = curve.sign as f64 * mu;
        for &i in idxs.iter().rev() {
            let n = curve.vertices.len();
            if i + 1 > n - 1 && !curve.closed {
                continue;
            }
            let j = (i + 1) % n;
            let a = curve.vertices[i].xy;
            let b = curve.vertices[j].xy;
            if (a - b).norm() < 1e-13 {
                continue;
            }
            let xy = project_to_level(&fd.plane, (a + b) * 0.5, level);
            curve.vertices.insert(
                i + 1,
                FaceCurveVertex {
                    xy,
                    position: fd.plane.point3d(&xy),
                    tensor: fd.plane.tensor_at(&xy),
                    key: VertexKey::Interior { tet: 0, idx: 0 },
                },
            );
        }
        // restore contiguous keys
        for (i, v) in curve.vertices.iter_mut().enumerate() {
            if !matches!(v.key, VertexKey::EdgeRoot { .. }) {
                v.key = VertexKey::FaceCurve { face: f, curve: c, idx: i };
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Stage B: face curves
// ---------------------------------------------------------------------------

/// Map a mesh-edge root parameter to this face's Tri2 edge and parameter.
/// Face edges: 0 = (f0,f1), 1 = (f1,f2), 2 = (f0,f2) over the sorted vertex
/// triple; Tri2 edges run v0→v1, v1→v2, v2→v0.
fn face_edge_to_tri(face_edge: usize, t: f64) -> (usize, f64) {
    match face_edge {
        0 => (0, t),
        1 => (1, t),
        _ => (2, 1.0 - t),
    }
}

fn tri_edge_to_face(tri_edge: usize, t: f64) -> (usize, f64) {
    match tri_edge {
        0 => (0, t),
        1 => (1, t),
        _ => (2, 1.0 - t),
    }
}

fn build_face_curves(
    mesh: &TetMesh,
    fi: usize,
    edge_roots: &[Vec<EdgeRootPoint>],
    mu: f64,
    opts: &ExtractOptions,
) -> Result<FaceData> {
    let positions = mesh.face_positions(fi);
    let tensors = mesh.face_tensors(fi);
    let plane = match PlaneField::from_triangle(&positions, &tensors) {
        Ok(p) => p,
        Err(Error::NonGenericPlane(_)) => {
            // Tensor span on this face is degenerate; nudge the tensors by a
            // deterministic perturbation derived from the face id.
            let eps = 1e-9 * tensors.iter().map(|t| t.norm()).fold(0.0, f64::max).max(1e-300);
            let mut t2 = tensors;
            let dirs = [
                SymTensor3::from_diagonal([1.0, -1.0, 0.0]),
                SymTensor3::from_diagonal([0.0, 1.0, -1.0]),
                SymTensor3::new_traceless(0.0, 0.0, 0.0, 1.0, 0.3, 0.7),
            ];
            for (k, t) in t2.iter_mut().enumerate() {
                *t = t.add(&dirs[k].scale(eps * ((fi % 7 + 1) as f64)));
            }
            PlaneField::from_triangle(&positions, &t2)?
        }
        Err(e) => return Err(e),
    };
    let tri = Tri2 {
        v: [
            plane.to_plane(&positions[0]),
            plane.to_plane(&positions[1]),
            plane.to_plane(&positions[2]),
        ],
    };

    // Edge seeds from the shared per-edge root table.
    struct Seed {
        tri_edge: usize,
        tri_t: f64,
        face_edge: usize,
        root: usize,
        sign: i8,
    }
    let mut seeds: Vec<Seed> = Vec::new();
    for (fe, &eid) in mesh.face_edges[fi].iter().enumerate() {
        for (ri, root) in edge_roots[eid].iter().enumerate() {
            let (te, tt) = face_edge_to_tri(fe, root.t);
            seeds.push(Seed {
                tri_edge: te,
                tri_t: tt,
                face_edge: fe,
                root: ri,
                sign: root.sign,
            });
        }
    }
    seeds.sort_by(|a, b| {
        (a.tri_edge, a.tri_t)
            .partial_cmp(&(b.tri_edge, b.tri_t))
            .unwrap()
    });

    let has_seeds = !seeds.is_empty();
    let mut curves: Vec<FaceCurve> = Vec::new();
    let mut used = vec![false; seeds.len()];
    let centroid = (tri.v[0] + tri.v[1] + tri.v[2]) / 3.0;

    let root_data = |face_edge: usize, root: usize| -> &EdgeRootPoint {
        &edge_roots[mesh.face_edges[fi][face_edge]][root]
    };

    for si in 0..seeds.len() {
        if used[si] {
            continue;
        }
        used[si] = true;
        let seed = &seeds[si];
        let start_xy = tri.point_on_edge(seed.tri_edge, seed.tri_t);
        let level = seed.sign as f64 * mu;
        let inward = centroid - start_xy;
        let mut traced = trace_level_curve(&plane, &tri, level, start_xy, inward, false)?;
        if matches!(traced.end, TraceEnd::Stalled) {
            // Measure-zero tie (curve through a vertex or a tangency):
            // perturb the level and retrace.
            for bump in [1e-10, -1e-10] {
                let lv = level * (1.0 + bump) + bump * 1e-12;
                let t2 = trace_level_curve(&plane, &tri, lv, start_xy, inward, false)?;
                if !matches!(t2.end, TraceEnd::Stalled) {
                    traced = t2;
                    break;
                }
            }
        }
        let TraceEnd::Edge { edge: exit_edge, t: exit_t } = traced.end else {
            return Err(Error::TraceStall(0.0));
        };
        // Match the exit to an unused root of the same sign; the owning
        // edge is ambiguous only within corner tolerance, so match by
        // position over all edges.
        let exit_point = tri.point_on_edge(exit_edge, exit_t);
        let mut best: Option<(usize, f64)> = None;
        for (sj, other) in seeds.iter().enumerate() {
            if used[sj] || other.sign != seed.sign {
                continue;
            }
            let d = (tri.point_on_edge(other.tri_edge, other.tri_t) - exit_point).norm();
            if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                best = Some((sj, d));
            }
        }
        let Some((sj, dist)) = best else {
            return Err(Error::AssemblyError(format!(
                "face {fi}: traced curve exit has no matching edge root"
            )));
        };
        if dist > 0.05 * tri.diameter() {
            return Err(Error::AssemblyError(format!(
                "face {fi}: curve exit {dist:.3e} away from the nearest edge root"
            )));
        }
        used[sj] = true;
        let end_seed = &seeds[sj];

        // Compose the curve: exact root endpoints, traced interior.
        let start_root = root_data(seed.face_edge, seed.root);
        let end_root = root_data(end_seed.face_edge, end_seed.root);
        let mut vertices: Vec<FaceCurveVertex> = Vec::with_capacity(traced.points.len() + 2);
        vertices.push(FaceCurveVertex {
            xy: start_xy,
            position: start_root.position,
            tensor: start_root.tensor,
            key: VertexKey::EdgeRoot {
                edge: mesh.face_edges[fi][seed.face_edge],
                root: seed.root,
            },
        });
        for p in traced.points.iter().skip(1) {
            // drop points indistinguishable from the endpoints
            if (p - start_xy).norm() < 1e-12
                || (p - tri.point_on_edge(end_seed.tri_edge, end_seed.tri_t)).norm() < 1e-12
            {
                continue;
            }
            vertices.push(FaceCurveVertex {
                xy: *p,
                position: plane.point3d(p),
                tensor: plane.tensor_at(p),
                key: VertexKey::Interior { tet: 0, idx: 0 },
            });
        }
        // Drop the traced exit point (replaced by the exact root).
        if vertices.len() > 1 {
            vertices.pop();
        }
        vertices.push(FaceCurveVertex {
            xy: tri.point_on_edge(end_seed.tri_edge, end_seed.tri_t),
            position: end_root.position,
            tensor: end_root.tensor,
            key: VertexKey::EdgeRoot {
                edge: mesh.face_edges[fi][end_seed.face_edge],
                root: end_seed.root,
            },
        });
        refine_curve_by_v2(&plane, level, false, &mut vertices);
        curves.push(FaceCurve {
            face: fi,
            index: curves.len(),
            sign: seed.sign,
            closed: false,
            vertices,
        });
    }

    // Interior loops from Morse seeds. Optionally skip faces that show no
    // sign of the level inside when a fast scan is requested.
    let run_critical = if opts.fast_loop_scan && !has_seeds {
        coarse_face_scan_hits(&plane, &tri, mu)
    } else {
        true
    };
    if run_critical {
        let cps = plane_critical_points(&plane)?;
        for cp in cps.iter() {
            if !tri.contains(&cp.xy, -1e-9) {
                continue;
            }
            let is_ext = matches!(
                cp.kind,
                CriticalKind::Max | CriticalKind::Min | CriticalKind::Degenerate
            );
            if !is_ext {
                continue;
            }
            // Candidate levels separated from the extremum value.
            let mut levels: Vec<f64> = Vec::new();
            if mu == 0.0 {
                if cp.mode.abs() > 1e-12 {
                    levels.push(0.0);
                }
            } else {
                if cp.mode > mu {
                    levels.push(mu);
                }
                if cp.mode < -mu {
                    levels.push(-mu);
                }
            }
            for level in levels {
                // Ray toward the farthest triangle corner.
                let far = *tri
                    .v
                    .iter()
                    .max_by(|a, b| {
                        (*a - cp.xy)
                            .norm()
                            .partial_cmp(&(*b - cp.xy).norm())
                            .unwrap()
                    })
                    .unwrap();
                let t_ext = plane.tensor_at(&cp.xy);
                let t_far = plane.tensor_at(&far);
                let ray_roots = edge_mode_roots(&t_ext, &t_far, mu);
                for (rt, rsign) in ray_roots {
                    if mu > 0.0 && (rsign as f64 * mu - level).abs() > 1e-12 {
                        continue;
                    }
                    let seed_xy = cp.xy + (far - cp.xy) * rt;
                    if !tri.contains(&seed_xy, 1e-12) {
                        continue;
                    }
                    // Skip seeds already on a traced curve.
                    let dup = curves.iter().any(|c| {
                        c.vertices
                            .iter()
                            .any(|v| (v.xy - seed_xy).norm() < 0.1 * tri.diameter() * 0.08)
                    });
                    if dup {
                        continue;
                    }
                    let tangent_dir = {
                        let g = plane.mode_gradient(&seed_xy);
                        Vector2::new(-g.y, g.x)
                    };
                    let traced =
                        trace_level_curve(&plane, &tri, level, seed_xy, tangent_dir, true)?;
                    if traced.end != TraceEnd::Closed {
                        continue;
                    }
                    let sign = if mu == 0.0 {
                        0
                    } else if level > 0.0 {
                        1
                    } else {
                        -1
                    };
                    let mut vertices: Vec<FaceCurveVertex> = traced
                        .points
                        .iter()
                        .map(|p| FaceCurveVertex {
                            xy: *p,
                            position: plane.point3d(p),
                            tensor: plane.tensor_at(p),
                            key: VertexKey::Interior { tet: 0, idx: 0 },
                        })
                        .collect();
                    refine_curve_by_v2(&plane, level, true, &mut vertices);
                    if vertices.len() >= 3 {
                        curves.push(FaceCurve {
                            face: fi,
                            index: curves.len(),
                            sign,
                            closed: true,
                            vertices,
                        });
                    }
                    break;
                }
            }
        }
    }

    Ok(FaceData { plane, tri, curves })
}

/// Maximum angle between the medium eigenvectors of consecutive curve
/// vertices; keeps the lifted polylines faithful on the manifold so nearby
/// chains cannot cross through discretization.
const V2_STEP_LIMIT: f64 = 0.03;

/// Smallest permitted v2 step for the junction grading.
const V2_STEP_FLOOR: f64 = 0.002;

/// Insert curve vertices until consecutive medium-eigenvector directions
/// subtend at most [`V2_STEP_LIMIT`] (as lines), graded down toward the
/// curve endpoints: chains meeting at a junction stay within their sectors
/// so their lifted polylines cannot cross each other near the junction.
fn refine_curve_by_v2(
    plane: &PlaneField,
    level: f64,
    closed: bool,
    vertices: &mut Vec<FaceCurveVertex>,
) {
    let v2_line = |t: &SymTensor3| eigen_decompose(t).v[1];
    let line_angle =
        |a: &Vector3<f64>, b: &Vector3<f64>| a.dot(b).abs().clamp(0.0, 1.0).acos();
    let mut guard = 0;
    loop {
        guard += 1;
        let n = vertices.len();
        if n < 2 || guard > 24 {
            return;
        }
        let v2s: Vec<Vector3<f64>> = vertices.iter().map(|v| v2_line(&v.tensor)).collect();
        let (v2_first, v2_last) = (v2s[0], v2s[n - 1]);
        let seg_count = if closed { n } else { n - 1 };
        let mut inserts: Vec<(usize, FaceCurveVertex)> = Vec::new();
        for seg in 0..seg_count {
            let (i, j) = (seg, (seg + 1) % n);
            let ang = line_angle(&v2s[i], &v2s[j]);
            let allowed = if closed {
                V2_STEP_LIMIT
            } else {
                let to_ends = line_angle(&v2s[i], &v2_first)
                    .min(line_angle(&v2s[i], &v2_last))
                    .min(line_angle(&v2s[j], &v2_first))
                    .min(line_angle(&v2s[j], &v2_last));
                (0.5 * to_ends).clamp(V2_STEP_FLOOR, V2_STEP_LIMIT)
            };
            if ang <= allowed {
                continue;
            }
            if (vertices[i].xy - vertices[j].xy).norm() < 1e-13 {
                continue;
            }
            let mid_xy = (vertices[i].xy + vertices[j].xy) * 0.5;
            let xy = project_to_level(plane, mid_xy, level);
            inserts.push((
                seg,
                FaceCurveVertex {
                    xy,
                    position: plane.point3d(&xy),
                    tensor: plane.tensor_at(&xy),
                    key: VertexKey::Interior { tet: 0, idx: 0 },
                },
            ));
        }
        if inserts.is_empty() {
            return;
        }
        for (seg, v) in inserts.into_iter().rev() {
            vertices.insert(seg + 1, v);
        }
    }
}

fn coarse_face_scan_hits(plane: &PlaneField, tri: &Tri2, mu: f64) -> bool {
    let n = 6;
    let mut any_above = false;
    let mut any_below = false;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let a = i as f64 / n as f64;
            let b = j as f64 / n as f64;
            let p = tri.v[0] * (1.0 - a - b) + tri.v[1] * a + tri.v[2] * b;
            let m = plane.mode(&p).abs();
            if m > mu {
                any_above = true;
            } else {
                any_below = true;
            }
        }
    }
    any_above && any_below
}

// ---------------------------------------------------------------------------
// Stage C: crossings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct CrossingInsert {
    face: usize,
    curve: usize,
    /// Segment index in the pre-enrichment vertex list.
    seg: usize,
    /// Chord parameter inside the segment.
    s: f64,
    tet: usize,
    xy: Vector2<f64>,
    position: Vector3<f64>,
    tensor: SymTensor3,
    /// When the crossing coincides with an existing vertex.
    snap_to_vertex: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct CrossingOwner {
    tet: usize,
}

/// Project a chord point back onto the level curve along the in-plane mode
/// gradient (two Newton steps).
fn project_to_level(plane: &PlaneField, xy: Vector2<f64>, level: f64) -> Vector2<f64> {
    let mut p = xy;
    for _ in 0..3 {
        let g = plane.mode_gradient(&p);
        let n2 = g.norm_squared();
        if n2 < 1e-300 {
            return p;
        }
        p -= g * ((plane.mode(&p) - level) / n2);
    }
    p
}

/// Oriented medium eigenvector at a curve point for this tet's field.
fn oriented_v2(
    field: &LinearTensorField,
    tensor: &SymTensor3,
    sign: i8,
    mu: f64,
) -> Result<Vector3<f64>> {
    let frame = eigen_decompose(tensor);
    field::disambiguate_v2(field, &frame, sign as f64 * mu)
}

fn detect_crossings(
    mesh: &TetMesh,
    ti: usize,
    field: &LinearTensorField,
    faces: &[FaceData],
    mu: f64,
    neutral: bool,
) -> Result<Vec<CrossingInsert>> {
    let mut out = Vec::new();
    if neutral && field.char_eigenframe().lambda[0] - field.char_eigenframe().lambda[1] < 1e-10 {
        return Ok(out);
    }
    for &fi in &mesh.tet_faces[ti] {
        let fd = &faces[fi];
        for (ci, curve) in fd.curves.iter().enumerate() {
            let n = curve.vertices.len();
            if n < 2 {
                continue;
            }
            let v2s: Vec<Vector3<f64>> = curve
                .vertices
                .iter()
                .map(|v| oriented_v2(field, &v.tensor, curve.sign, mu))
                .collect::<Result<Vec<_>>>()?;
            let seg_count = if curve.closed { n } else { n - 1 };
            let level = curve.sign as f64 * mu;
            for seg in 0..seg_count {
                let (i, j) = (seg, (seg + 1) % n);
                let (a_xy, b_xy) = (curve.vertices[i].xy, curve.vertices[j].xy);
                let curve_point = |s: f64| -> Vector2<f64> {
                    project_to_level(&fd.plane, a_xy + (b_xy - a_xy) * s, level)
                };
                let delta_at = |s: f64| -> Result<f64> {
                    let xy = curve_point(s);
                    let t = fd.plane.tensor_at(&xy);
                    let frame = eigen_decompose(&t);
                    field::boundary_residual(field, &frame.v[1], mu)
                };
                let mut emit = |s: f64| -> Result<()> {
                    let xy = curve_point(s);
                    let snap = if s < 1e-9 {
                        Some(i)
                    } else if s > 1.0 - 1e-9 {
                        Some(j)
                    } else {
                        None
                    };
                    out.push(CrossingInsert {
                        face: fi,
                        curve: ci,
                        seg,
                        s,
                        tet: ti,
                        xy,
                        position: fd.plane.point3d(&xy),
                        tensor: fd.plane.tensor_at(&xy),
                        snap_to_vertex: snap,
                    });
                    Ok(())
                };
                // The boundary residual stays non-negative along realized
                // curves; a crossing is a tangential touch of the complex
                // boundary and always flips the disambiguated orientation.
                // Two touches inside one segment cancel in the dot test and
                // bound only a sub-tolerance lens, which is snapped away.
                let _ = &delta_at;
                if v2s[i].dot(&v2s[j]) >= 0.0 {
                    continue;
                }
                let anchor = v2s[i];
                let flip_at = |s: f64| -> Result<bool> {
                    let xy = curve_point(s);
                    let t = fd.plane.tensor_at(&xy);
                    let v2 = oriented_v2(field, &t, curve.sign, mu)?;
                    Ok(v2.dot(&anchor) < 0.0)
                };
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if flip_at(mid)? {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                emit(0.5 * (lo + hi))?;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage E: patches
// ---------------------------------------------------------------------------

/// One vertex of the region boundary in the manifold chart.
#[derive(Debug, Clone)]
struct BoundaryVertex {
    v2: Vector3<f64>,
    key: VertexKey,
    position: Vector3<f64>,
    tensor: SymTensor3,
    sign: i8,
    on_arc: bool,
}

/// A boundary chain with endpoints identified by crossing-rep node ids
/// (None for closed chains).
#[derive(Debug, Clone)]
struct BoundaryChain {
    vertices: Vec<BoundaryVertex>,
    start_node: Option<usize>,
    end_node: Option<usize>,
    closed: bool,
}

const CANONICAL_SNAP: f64 = 1e-13;

#[allow(clippy::too_many_arguments)]
fn build_patch(
    mesh: &TetMesh,
    ti: usize,
    field: &LinearTensorField,
    faces: &[FaceData],
    crossing_map: &HashMap<(usize, usize, usize), Vec<CrossingOwner>>,
    mu: f64,
    neutral: bool,
    opts: &ExtractOptions,
) -> Result<PatchOutcome> {
    let tet_positions = mesh.tet_positions(ti);
    let bary_min = |p: &Vector3<f64>| crate::mesh::barycentric_of(&tet_positions, p).min();
    let inside = |p: &Vector3<f64>| bary_min(p) >= -BARY_TOL;

    // Gather this tet's face curves.
    let mut curve_refs: Vec<(usize, usize)> = Vec::new(); // (face, curve)
    for &fi in &mesh.tet_faces[ti] {
        for (ci, _) in faces[fi].curves.iter().enumerate() {
            curve_refs.push((fi, ci));
        }
    }
    curve_refs.sort_unstable();

    let has_face_curves = !curve_refs.is_empty();
    // Early out: no face curves and no chance of an interior component.
    if !has_face_curves && !coarse_tet_scan_hits(mesh, ti, field, mu, neutral) {
        return Ok(PatchOutcome::Done(
            TetPatch {
                tet: ti,
                ..Default::default()
            },
            Vec::new(),
            false,
        ));
    }

    // Tet-boundary loops: chain open curves at shared edge roots.
    let loops3d = assemble_boundary_loops(faces, &curve_refs, ti)?;

    // Lift loops, splitting at this tet's crossings.
    let mut nodes: Vec<CrossingNode> = Vec::new();
    let mut chains: Vec<BoundaryChain> = Vec::new();
    for lp in &loops3d {
        lift_loop(
            mesh,
            ti,
            field,
            faces,
            crossing_map,
            lp,
            mu,
            &mut nodes,
            &mut chains,
        )?;
    }

    // Arc segments (mode surfaces only).
    let mut singular_segments: Vec<SingularSegment> = Vec::new();
    if !neutral {
        add_arc_chains(field, ti, mu, &bary_min, &mut nodes, &mut chains)?;
    } else {
        // Singular segments clipped to the tet, reported as metadata and
        // used to pair crossing nodes across faces.
        singular_segments = clip_singular_lines(mesh, ti, field)?;
        pair_neutral_nodes(&mut nodes, &mut chains, &singular_segments, ti)?;
    }

    // Assemble closed boundary loops in the manifold.
    let boundary_loops = close_boundary(&nodes, chains)?;

    if boundary_loops.is_empty() {
        // Interior-component scan: grid points whose lift lands inside the
        // tet without any boundary indicate an unreachable closed
        // component. For linear cells this cannot occur off the arc path;
        // flag it rather than mesh it.
        let flagged = interior_members_exist(field, &inside, mu);
        return Ok(PatchOutcome::Done(
            TetPatch {
                tet: ti,
                ..Default::default()
            },
            singular_segments,
            flagged,
        ));
    }

    // Triangulate the region bounded by the loops.
    match triangulate_region(
        faces,
        ti,
        field,
        &boundary_loops,
        mu,
        neutral,
        &inside,
        opts,
    )? {
        TriOutcome::Patch(patch) => Ok(PatchOutcome::Done(patch, singular_segments, false)),
        TriOutcome::Refine(reqs) => Ok(PatchOutcome::NeedsRefine(reqs)),
    }
}

fn coarse_tet_scan_hits(
    mesh: &TetMesh,
    ti: usize,
    field: &LinearTensorField,
    mu: f64,
    neutral: bool,
) -> bool {
    // Level function F = 54 det² − μ²‖T‖⁶ changes sign in the tet iff the
    // surface passes; sample a coarse barycentric lattice.
    let p = mesh.tet_positions(ti);
    let n = 3usize;
    let mut saw_pos = false;
    let mut saw_neg = false;
    for i in 0..=n {
        for j in 0..=(n - i) {
            for k in 0..=(n - i - j) {
                let l = n - i - j - k;
                let q = (p[0] * i as f64 + p[1] * j as f64 + p[2] * k as f64 + p[3] * l as f64)
                    / n as f64;
                let t = field.eval(&q);
                let f = if neutral {
                    t.det()
                } else {
                    54.0 * t.det() * t.det() - mu * mu * t.norm_squared().powi(3)
                };
                if f > 0.0 {
                    saw_pos = true;
                } else {
                    saw_neg = true;
                }
                if saw_pos && saw_neg {
                    return true;
                }
            }
        }
    }
    false
}

/// Chain this tet's open face curves into closed loops on the tet boundary;
/// closed face curves pass through unchanged. Loop entries reference curves
/// with an orientation flag.
fn assemble_boundary_loops(
    faces: &[FaceData],
    curve_refs: &[(usize, usize)],
    ti: usize,
) -> Result<Vec<Vec<(usize, usize, bool)>>> {
    let mut open: Vec<(usize, usize)> = Vec::new();
    let mut loops: Vec<Vec<(usize, usize, bool)>> = Vec::new();
    for &(fi, ci) in curve_refs {
        if faces[fi].curves[ci].closed {
            loops.push(vec![(fi, ci, true)]);
        } else {
            open.push((fi, ci));
        }
    }
    // endpoint key -> (list index, is_start)
    let mut ends: HashMap<VertexKey, Vec<(usize, bool)>> = HashMap::new();
    for (li, &(fi, ci)) in open.iter().enumerate() {
        let c = &faces[fi].curves[ci];
        ends.entry(c.vertices.first().unwrap().key)
            .or_default()
            .push((li, true));
        ends.entry(c.vertices.last().unwrap().key)
            .or_default()
            .push((li, false));
    }
    for (k, v) in &ends {
        if v.len() != 2 {
            return Err(Error::AssemblyError(format!(
                "tet {ti}: edge-root {k:?} is shared by {} curve ends (want 2)",
                v.len()
            )));
        }
    }
    let mut used = vec![false; open.len()];
    for start in 0..open.len() {
        if used[start] {
            continue;
        }
        let mut lp: Vec<(usize, usize, bool)> = Vec::new();
        let mut cur = start;
        let mut forward = true;
        loop {
            used[cur] = true;
            let (fi, ci) = open[cur];
            lp.push((fi, ci, forward));
            let c = &faces[fi].curves[ci];
            let exit_key = if forward {
                c.vertices.last().unwrap().key
            } else {
                c.vertices.first().unwrap().key
            };
            let next = ends[&exit_key]
                .iter()
                .copied()
                .find(|&(li, _)| li != cur || {
                    // a curve can close onto itself through both ends
                    false
                })
                .or_else(|| ends[&exit_key].iter().copied().find(|&(li, _)| li == cur));
            let Some((nli, n_is_start)) = next.filter(|&(li, _)| !used[li] || li == start) else {
                return Err(Error::AssemblyError(format!(
                    "tet {ti}: boundary loop failed to close"
                )));
            };
            if nli == start {
                break;
            }
            cur = nli;
            forward = n_is_start;
        }
        loops.push(lp);
    }
    Ok(loops)
}

/// One crossing on the tet boundary with its two antipodal manifold reps.
#[derive(Debug, Clone)]
struct CrossingNode {
    key: VertexKey,
    position: Vector3<f64>,
    tensor: SymTensor3,
    sign: i8,
    rep_plus: Vector3<f64>,
    /// Degree bookkeeping: (chain idx, at_start) attachments per rep.
    attach_plus: Vec<(usize, bool)>,
    attach_minus: Vec<(usize, bool)>,
}

#[allow(clippy::too_many_arguments)]
fn lift_loop(
    _mesh: &TetMesh,
    ti: usize,
    field: &LinearTensorField,
    faces: &[FaceData],
    crossing_map: &HashMap<(usize, usize, usize), Vec<CrossingOwner>>,
    lp: &[(usize, usize, bool)],
    mu: f64,
    nodes: &mut Vec<CrossingNode>,
    chains: &mut Vec<BoundaryChain>,
) -> Result<()> {
    // Flatten the loop into a cyclic vertex sequence (drop duplicated
    // junction vertices between consecutive curves).
    #[derive(Clone)]
    struct Flat {
        v2: Vector3<f64>,
        key: VertexKey,
        position: Vector3<f64>,
        tensor: SymTensor3,
        sign: i8,
        is_crossing: bool,
    }
    let mut flat: Vec<Flat> = Vec::new();
    for &(fi, ci, forward) in lp {
        let c = &faces[fi].curves[ci];
        let n = c.vertices.len();
        let idxs: Vec<usize> = if forward {
            (0..n).collect()
        } else {
            (0..n).rev().collect()
        };
        for (pos_in_curve, &vi) in idxs.iter().enumerate() {
            if pos_in_curve == 0 && !flat.is_empty() {
                // junction vertex duplicated across curves
                if flat.last().unwrap().key == c.vertices[vi].key {
                    continue;
                }
            }
            let v = &c.vertices[vi];
            let is_crossing = match v.key {
                VertexKey::FaceCurve { face, curve, idx } => crossing_map
                    .get(&(face, curve, idx))
                    .map(|owners| owners.iter().any(|o| o.tet == ti))
                    .unwrap_or(false),
                _ => false,
            };
            let v2 = oriented_v2(field, &v.tensor, c.sign, mu)?;
            flat.push(Flat {
                v2,
                key: v.key,
                position: v.position,
                tensor: v.tensor,
                sign: c.sign,
                is_crossing,
            });
        }
    }
    // Loop flattening may duplicate the seam vertex front/back.
    if flat.len() > 1 && flat.first().unwrap().key == flat.last().unwrap().key {
        flat.pop();
    }
    if flat.is_empty() {
        return Ok(());
    }

    let crossing_positions: Vec<usize> = flat
        .iter()
        .enumerate()
        .filter(|(_, f)| f.is_crossing)
        .map(|(i, _)| i)
        .collect();

    if crossing_positions.is_empty() {
        // Whole loop is one closed chain; orient v2 continuously from the
        // first vertex.
        let mut vertices = Vec::with_capacity(flat.len());
        let mut prev = flat[0].v2;
        for f in &flat {
            let v2 = if f.v2.dot(&prev) >= 0.0 { f.v2 } else { -f.v2 };
            prev = v2;
            vertices.push(BoundaryVertex {
                v2,
                key: f.key,
                position: f.position,
                tensor: f.tensor,
                sign: f.sign,
                on_arc: false,
            });
        }
        chains.push(BoundaryChain {
            vertices,
            start_node: None,
            end_node: None,
            closed: true,
        });
        return Ok(());
    }

    // Orientation pass over the whole cyclic sequence: propagate by
    // continuity, imposing exactly one antipodal flip at each crossing.
    // Near the boundary the per-vertex disambiguation is noise; only
    // continuity plus the flip structure is reliable.
    let n = flat.len();
    let k = crossing_positions.len();
    if k % 2 != 0 {
        return Err(Error::NonClosedBoundary(format!(
            "tet {ti}: odd number of orientation flips ({k}) along a boundary loop"
        )));
    }
    // Rotate the walk to start just after a crossing.
    let start = (crossing_positions[0] + 1) % n;
    let mut oriented: Vec<Vector3<f64>> = vec![Vector3::zeros(); n];
    oriented[start] = flat[start].v2;
    let mut prev = oriented[start];
    let mut idx = (start + 1) % n;
    while idx != start {
        let raw = flat[idx].v2;
        let mut v2 = if raw.dot(&prev) >= 0.0 { raw } else { -raw };
        oriented[idx] = v2;
        if flat[idx].is_crossing {
            // the next vertex continues on the antipodal sheet
            v2 = -v2;
        }
        prev = v2;
        idx = (idx + 1) % n;
    }

    // Nodes carry the arriving-side orientation as rep_plus.
    let mut node_of_flat: HashMap<usize, usize> = HashMap::new();
    for &cp in &crossing_positions {
        node_of_flat.insert(cp, nodes.len());
        nodes.push(CrossingNode {
            key: flat[cp].key,
            position: flat[cp].position,
            tensor: flat[cp].tensor,
            sign: flat[cp].sign,
            rep_plus: oriented[cp],
            attach_plus: Vec::new(),
            attach_minus: Vec::new(),
        });
    }

    // Chains between consecutive crossings: depart on the minus rep,
    // arrive on the plus rep.
    for w in 0..k {
        let from = crossing_positions[w];
        let to = crossing_positions[(w + 1) % k];
        let from_node = node_of_flat[&from];
        let to_node = node_of_flat[&to];
        let mut vertices: Vec<BoundaryVertex> = Vec::new();
        vertices.push(BoundaryVertex {
            v2: -oriented[from],
            key: flat[from].key,
            position: flat[from].position,
            tensor: flat[from].tensor,
            sign: flat[from].sign,
            on_arc: false,
        });
        let mut i = (from + 1) % n;
        while i != to {
            let f = &flat[i];
            vertices.push(BoundaryVertex {
                v2: oriented[i],
                key: f.key,
                position: f.position,
                tensor: f.tensor,
                sign: f.sign,
                on_arc: false,
            });
            i = (i + 1) % n;
        }
        vertices.push(BoundaryVertex {
            v2: oriented[to],
            key: flat[to].key,
            position: flat[to].position,
            tensor: flat[to].tensor,
            sign: flat[to].sign,
            on_arc: false,
        });
        let chain_idx = chains.len();
        chains.push(BoundaryChain {
            vertices,
            start_node: Some(encode_rep(from_node, false)),
            end_node: Some(encode_rep(to_node, true)),
            closed: false,
        });
        nodes[from_node].attach_minus.push((chain_idx, true));
        nodes[to_node].attach_plus.push((chain_idx, false));
    }
    Ok(())
}

fn encode_rep(node: usize, plus: bool) -> usize {
    node * 2 + if plus { 0 } else { 1 }
}

// --- arcs ---

struct CanonicalLoop {
    /// Unit directions along the loop (deduplicated junctions).
    dirs: Vec<Vector3<f64>>,
    /// Lifted data per sample.
    lifted: Vec<field::LiftedPoint>,
    /// (octant, fwd, start index, sample count) per constituent arc.
    arcs: Vec<([i8; 3], bool, usize, usize)>,
}

fn canonical_loops(set: &ArcSet) -> Vec<usize> {
    // Loops come in antipodal pairs; canonical = the loop whose first
    // sample has positive third-axis coordinate (c > 0 octants first).
    if set.crosses_mx {
        vec![0]
    } else {
        vec![0, 1]
    }
}

fn build_canonical_loop(
    field: &LinearTensorField,
    set: &ArcSet,
    loop_idx: usize,
    mu: f64,
) -> Result<CanonicalLoop> {
    let mut dirs: Vec<Vector3<f64>> = Vec::new();
    let mut arcs_meta = Vec::new();
    for &(ai, fwd) in &set.loops[loop_idx] {
        let arc = &set.arcs[ai];
        let m = arc.samples.len();
        let order: Vec<usize> = if fwd { (0..m).collect() } else { (0..m).rev().collect() };
        let start = dirs.len();
        let mut count = 0usize;
        for &si in &order {
            let mut d = arc.samples[si].v2;
            // snap near-zero frame coordinates so octant twins coincide
            let f = field.char_eigenframe();
            let mut coords = Vector3::new(f.v[0].dot(&d), f.v[1].dot(&d), f.v[2].dot(&d));
            for c in coords.iter_mut() {
                if c.abs() < CANONICAL_SNAP.sqrt() * 1e-3 {
                    *c = 0.0;
                }
            }
            d = (f.v[0] * coords.x + f.v[1] * coords.y + f.v[2] * coords.z).normalize();
            if let Some(last) = dirs.last() {
                if (d - last).norm() < 1e-9 {
                    continue;
                }
            }
            dirs.push(d);
            count += 1;
        }
        arcs_meta.push((arc.octant, fwd, start, count));
    }
    // close the cycle: drop a duplicated last sample
    if dirs.len() > 1 && (dirs[0] - *dirs.last().unwrap()).norm() < 1e-9 {
        dirs.pop();
        if let Some(last) = arcs_meta.last_mut() {
            last.3 = last.3.saturating_sub(1);
        }
    }
    let lifted = dirs
        .iter()
        .map(|d| {
            lift_disambiguated(field, d, mu)?.ok_or_else(|| {
                Error::NonClosedBoundary("arc sample classified complex".into())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CanonicalLoop {
        dirs,
        lifted,
        arcs: arcs_meta,
    })
}

/// Fractional loop coordinate of a boundary-arc point given its direction.
fn loop_coordinate(cl: &CanonicalLoop, dir: &Vector3<f64>) -> (f64, usize) {
    // nearest segment by projection
    let n = cl.dirs.len();
    let mut best = (f64::INFINITY, 0.0f64, 0usize);
    for i in 0..n {
        let a = cl.dirs[i];
        let b = cl.dirs[(i + 1) % n];
        let ab = b - a;
        let denom = ab.norm_squared().max(1e-300);
        let t = ((dir - a).dot(&ab) / denom).clamp(0.0, 1.0);
        let p = a + ab * t;
        let d = (dir - p).norm();
        if d < best.0 {
            best = (d, t, i);
        }
    }
    (best.2 as f64 + best.1, best.2)
}

fn add_arc_chains(
    field: &LinearTensorField,
    ti: usize,
    mu: f64,
    bary_min: &impl Fn(&Vector3<f64>) -> f64,
    nodes: &mut Vec<CrossingNode>,
    chains: &mut Vec<BoundaryChain>,
) -> Result<()> {
    let inside = |p: &Vector3<f64>| bary_min(p) >= -BARY_TOL;
    let set = boundary_arcs(field, mu)?;
    for li in canonical_loops(&set) {
        let cl = build_canonical_loop(field, &set, li, mu)?;
        let n = cl.dirs.len();
        if n < 3 {
            continue;
        }
        // Locate this loop's crossings.
        let mut on_loop: Vec<(f64, usize)> = Vec::new(); // (loop coord, node)
        for (ni, nd) in nodes.iter().enumerate() {
            // canonicalize the rep into this loop's hemisphere family
            let cand_dirs = [nd.rep_plus, -nd.rep_plus];
            let mut best: Option<(f64, f64)> = None; // (dist, coord)
            for d in cand_dirs {
                let (coord, seg) = loop_coordinate(&cl, &d);
                let a = cl.dirs[seg];
                let b = cl.dirs[(seg + 1) % n];
                let t = coord - seg as f64;
                let p = (a + (b - a) * t).normalize();
                let dist = (d - p).norm();
                if best.map(|(bd, _)| dist < bd).unwrap_or(true) {
                    best = Some((dist, coord));
                }
            }
            let (dist, coord) = best.unwrap();
            if std::env::var("MODESURF_ARC_DEBUG").is_ok() {
                eprintln!(
                    "tet {ti} node {ni} loop {li}: dist {dist:.3e} coord {coord:.3} rep {:?}",
                    nd.rep_plus
                );
            }
            if dist < 0.5 * field::ARC_SAMPLE_STEP {
                on_loop.push((coord, ni));
            }
        }
        on_loop.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

        if on_loop.is_empty() {
            // Whole loop in or out, decided by one lifted sample.
            if inside(&cl.lifted[0].position) {
                for sigma in [1.0f64, -1.0] {
                    let vertices: Vec<BoundaryVertex> = (0..n)
                        .map(|i| BoundaryVertex {
                            v2: cl.dirs[i] * sigma,
                            key: VertexKey::Arc {
                                tet: ti,
                                loop_id: li,
                                idx: i,
                            },
                            position: cl.lifted[i].position,
                            tensor: cl.lifted[i].tensor,
                            sign: cl.lifted[i].sign,
                            on_arc: true,
                        })
                        .collect();
                    chains.push(BoundaryChain {
                        vertices,
                        start_node: None,
                        end_node: None,
                        closed: true,
                    });
                }
            }
            continue;
        }

        // Segments between consecutive crossings (cyclic). The fold curve
        // crosses the tet boundary at every crossing, so segments alternate
        // inside/outside; anchor the parity at the most decisive midpoint
        // (near-edge folds make individual tests unreliable).
        let k = on_loop.len();
        if k % 2 != 0 {
            return Err(Error::NonClosedBoundary(format!(
                "tet {ti}: odd number of fold crossings ({k}) on one arc loop"
            )));
        }
        let mut depth = vec![f64::NEG_INFINITY; k];
        for w in 0..k {
            let (c0, _) = on_loop[w];
            let (c1, _) = on_loop[(w + 1) % k];
            let span = if w + 1 == k {
                c1 + n as f64 - c0
            } else {
                c1 - c0
            };
            let mid = (c0 + 0.5 * span) % n as f64;
            let mid_i = mid.floor() as usize % n;
            let mid_t = mid - mid.floor();
            let mid_dir = (cl.dirs[mid_i]
                + (cl.dirs[(mid_i + 1) % n] - cl.dirs[mid_i]) * mid_t)
                .normalize();
            if let Ok(Some(mid_lift)) = lift_disambiguated(field, &mid_dir, mu) {
                depth[w] = bary_min(&mid_lift.position);
            }
        }
        let anchor = (0..k)
            .max_by(|&a, &b| depth[a].abs().partial_cmp(&depth[b].abs()).unwrap())
            .unwrap();
        let anchor_inside = depth[anchor] >= 0.0;
        for w in 0..k {
            let (c0, n0) = on_loop[w];
            let (c1, n1) = on_loop[(w + 1) % k];
            let span = if w + 1 == k {
                c1 + n as f64 - c0
            } else {
                c1 - c0
            };
            let retained = if (w + k - anchor) % 2 == 0 {
                anchor_inside
            } else {
                !anchor_inside
            };
            if !retained {
                continue;
            }
            // Canonical sample indices strictly inside (c0, c0+span).
            let mut sample_idx: Vec<usize> = Vec::new();
            let mut x = c0.floor() as i64 + 1;
            while (x as f64) < c0 + span {
                sample_idx.push(((x % n as i64 + n as i64) % n as i64) as usize);
                x += 1;
            }
            // Two antipodal instances.
            for sigma in [1.0f64, -1.0] {
                let start_dir_first = if let Some(&s0) = sample_idx.first() {
                    cl.dirs[s0] * sigma
                } else {
                    (cl.dirs[(c0.floor() as usize + 1) % n] * sigma).normalize()
                };
                let nd0 = &nodes[n0];
                let start_plus = nd0.rep_plus.dot(&start_dir_first) >= 0.0;
                let mut vertices = vec![BoundaryVertex {
                    v2: if start_plus { nd0.rep_plus } else { -nd0.rep_plus },
                    key: nd0.key,
                    position: nd0.position,
                    tensor: nd0.tensor,
                    sign: nd0.sign,
                    on_arc: true,
                }];
                for &si in &sample_idx {
                    vertices.push(BoundaryVertex {
                        v2: cl.dirs[si] * sigma,
                        key: VertexKey::Arc {
                            tet: ti,
                            loop_id: li,
                            idx: si,
                        },
                        position: cl.lifted[si].position,
                        tensor: cl.lifted[si].tensor,
                        sign: cl.lifted[si].sign,
                        on_arc: true,
                    });
                }
                let nd1 = &nodes[n1];
                let arrive = vertices.last().unwrap().v2;
                let end_plus = nd1.rep_plus.dot(&arrive) >= 0.0;
                vertices.push(BoundaryVertex {
                    v2: if end_plus { nd1.rep_plus } else { -nd1.rep_plus },
                    key: nd1.key,
                    position: nd1.position,
                    tensor: nd1.tensor,
                    sign: nd1.sign,
                    on_arc: true,
                });
                let chain_idx = chains.len();
                chains.push(BoundaryChain {
                    vertices,
                    start_node: Some(encode_rep(n0, start_plus)),
                    end_node: Some(encode_rep(n1, end_plus)),
                    closed: false,
                });
                if start_plus {
                    nodes[n0].attach_plus.push((chain_idx, true));
                } else {
                    nodes[n0].attach_minus.push((chain_idx, true));
                }
                if end_plus {
                    nodes[n1].attach_plus.push((chain_idx, false));
                } else {
                    nodes[n1].attach_minus.push((chain_idx, false));
                }
            }
        }
    }
    Ok(())
}

// --- neutral singular lines ---

fn clip_singular_lines(
    mesh: &TetMesh,
    ti: usize,
    field: &LinearTensorField,
) -> Result<Vec<SingularSegment>> {
    let lines = match field::neutral_singularities(field) {
        Ok(l) => l,
        Err(Error::DegenerateCharacteristic) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let p = mesh.tet_positions(ti);
    let mut out = Vec::new();
    for (lid, line) in lines.iter().enumerate() {
        // Clip the parametric line against the tet's four face planes.
        let mut t_lo = f64::NEG_INFINITY;
        let mut t_hi = f64::INFINITY;
        let faces_idx: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];
        for f in faces_idx {
            let (a, b, c) = (p[f[0]], p[f[1]], p[f[2]]);
            let nrm = (b - a).cross(&(c - a));
            let centroid = (p[0] + p[1] + p[2] + p[3]) / 4.0;
            let nrm = if (centroid - a).dot(&nrm) > 0.0 { nrm } else { -nrm };
            let denom = line.line_direction.dot(&nrm);
            let num = (a - line.point).dot(&nrm);
            if denom.abs() < 1e-300 {
                if num < 0.0 {
                    t_lo = f64::INFINITY;
                }
                continue;
            }
            let t = num / denom;
            if denom > 0.0 {
                t_lo = t_lo.max(t);
            } else {
                t_hi = t_hi.min(t);
            }
        }
        if t_lo < t_hi && t_lo.is_finite() && t_hi.is_finite() {
            out.push(SingularSegment {
                tet: ti,
                line: lid,
                direction_on_manifold: line.direction_on_manifold,
                endpoints: [
                    line.point + line.line_direction * t_lo,
                    line.point + line.line_direction * t_hi,
                ],
            });
        }
    }
    Ok(out)
}

/// At μ = 0 the crossing nodes sit at the parameterization singularities;
/// pair them across the faces pierced by the same singular line with a
/// connector chain (the singular segment).
fn pair_neutral_nodes(
    nodes: &mut Vec<CrossingNode>,
    chains: &mut Vec<BoundaryChain>,
    segments: &[SingularSegment],
    _ti: usize,
) -> Result<()> {
    // group node indices by singular direction
    let mut by_line: Vec<Vec<usize>> = vec![Vec::new(); segments.len()];
    for (ni, nd) in nodes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (si, seg) in segments.iter().enumerate() {
            let d = 1.0 - nd.rep_plus.dot(&seg.direction_on_manifold).abs();
            if best.map(|(_, bd)| d < bd).unwrap_or(true) {
                best = Some((si, d));
            }
        }
        if let Some((si, d)) = best {
            if d < 1e-6 {
                by_line[si].push(ni);
            }
        }
    }
    for (si, group) in by_line.iter().enumerate() {
        if group.len() != 2 {
            if !group.is_empty() {
                return Err(Error::NonClosedBoundary(format!(
                    "singular line {si} pierced by {} crossings (want 2)",
                    group.len()
                )));
            }
            continue;
        }
        let (a, b) = (group[0], group[1]);
        // Connect matching reps: rep_plus(a) with whichever rep of b points
        // the same way, and the two remaining reps.
        let same = nodes[a].rep_plus.dot(&nodes[b].rep_plus) >= 0.0;
        for (a_plus, b_plus) in [(true, same), (false, !same)] {
            let va = BoundaryVertex {
                v2: if a_plus { nodes[a].rep_plus } else { -nodes[a].rep_plus },
                key: nodes[a].key,
                position: nodes[a].position,
                tensor: nodes[a].tensor,
                sign: 0,
                on_arc: true,
            };
            let vb = BoundaryVertex {
                v2: if b_plus { nodes[b].rep_plus } else { -nodes[b].rep_plus },
                key: nodes[b].key,
                position: nodes[b].position,
                tensor: nodes[b].tensor,
                sign: 0,
                on_arc: true,
            };
            let chain_idx = chains.len();
            chains.push(BoundaryChain {
                vertices: vec![va, vb],
                start_node: Some(encode_rep(a, a_plus)),
                end_node: Some(encode_rep(b, b_plus)),
                closed: false,
            });
            if a_plus {
                nodes[a].attach_plus.push((chain_idx, true));
            } else {
                nodes[a].attach_minus.push((chain_idx, true));
            }
            if b_plus {
                nodes[b].attach_plus.push((chain_idx, false));
            } else {
                nodes[b].attach_minus.push((chain_idx, false));
            }
        }
    }
    Ok(())
}

// --- boundary closure ---

/// Walk chains into closed loops: every crossing rep must join exactly two
/// chain ends.
fn close_boundary(nodes: &[CrossingNode], chains: Vec<BoundaryChain>) -> Result<Vec<Vec<BoundaryVertex>>> {
    let mut loops: Vec<Vec<BoundaryVertex>> = Vec::new();
    let mut used = vec![false; chains.len()];

    // rep id -> chain ends
    let mut rep_ends: HashMap<usize, Vec<(usize, bool)>> = HashMap::new();
    for (ci, ch) in chains.iter().enumerate() {
        if ch.closed {
            continue;
        }
        rep_ends
            .entry(ch.start_node.unwrap())
            .or_default()
            .push((ci, true));
        rep_ends
            .entry(ch.end_node.unwrap())
            .or_default()
            .push((ci, false));
    }
    for (rep, ends) in &rep_ends {
        if ends.len() != 2 {
            let node = rep / 2;
            if std::env::var("MODESURF_CHART_DEBUG").is_ok() {
                let mut s = String::new();
                for (ni, nd) in nodes.iter().enumerate() {
                    s.push_str(&format!(
                        "node {ni}: key {:?} rep_plus {:?} attach+ {:?} attach- {:?}\n",
                        nd.key, nd.rep_plus, nd.attach_plus, nd.attach_minus
                    ));
                }
                for (ci, ch) in chains.iter().enumerate() {
                    s.push_str(&format!(
                        "chain {ci}: len {} closed {} start {:?} end {:?} first_key {:?} last_key {:?} first_v2 {:?}\n",
                        ch.vertices.len(),
                        ch.closed,
                        ch.start_node,
                        ch.end_node,
                        ch.vertices.first().map(|v| v.key),
                        ch.vertices.last().map(|v| v.key),
                        ch.vertices.first().map(|v| v.v2),
                    ));
                }
                let _ = std::fs::write("/tmp/closure_debug.txt", s);
            }
            return Err(Error::NonClosedBoundary(format!(
                "crossing {:?} rep {} joins {} chain ends (want 2)",
                nodes[node].key,
                rep % 2,
                ends.len()
            )));
        }
    }

    for (ci, ch) in chains.iter().enumerate() {
        if used[ci] {
            continue;
        }
        if ch.closed {
            used[ci] = true;
            loops.push(ch.vertices.clone());
            continue;
        }
        // walk
        let mut lp: Vec<BoundaryVertex> = Vec::new();
        let mut cur = ci;
        let mut forward = true;
        loop {
            used[cur] = true;
            let ch = &chains[cur];
            let verts: Vec<BoundaryVertex> = if forward {
                ch.vertices.clone()
            } else {
                ch.vertices.iter().rev().cloned().collect()
            };
            let skip = usize::from(!lp.is_empty());
            lp.extend(verts.into_iter().skip(skip));
            let exit_rep = if forward { ch.end_node } else { ch.start_node }.unwrap();
            let next = rep_ends[&exit_rep]
                .iter()
                .copied()
                .find(|&(cj, _)| cj != cur)
                .or_else(|| rep_ends[&exit_rep].iter().copied().find(|&(cj, _)| cj == cur));
            let Some((nj, n_is_start)) = next else {
                return Err(Error::NonClosedBoundary("dangling chain end".into()));
            };
            if used[nj] {
                if nj == ci {
                    break;
                }
                return Err(Error::NonClosedBoundary(
                    "boundary walk revisited a chain".into(),
                ));
            }
            cur = nj;
            forward = n_is_start;
        }
        // drop the duplicated closing vertex
        if lp.len() > 1 {
            lp.pop();
        }
        loops.push(lp);
    }
    Ok(loops)
}

// --- triangulation and lifting ---

fn stereographic_pole(samples: &[Vector3<f64>]) -> Vector3<f64> {
    let mut centroid = Vector3::zeros();
    let n = samples.len();
    for (i, s) in samples.iter().enumerate() {
        let prev = samples[(i + n - 1) % n];
        let next = samples[(i + 1) % n];
        let w = 0.5 * ((s - prev).norm() + (next - s).norm());
        centroid += s * w;
    }
    let mut pole = if centroid.norm() > 1e-9 {
        (-centroid).normalize()
    } else {
        Vector3::z()
    };
    // keep every sample at least 0.05 rad away from the pole
    let min_angle = |p: &Vector3<f64>| {
        samples
            .iter()
            .map(|s| s.dot(p).clamp(-1.0, 1.0).acos())
            .fold(f64::INFINITY, f64::min)
    };
    if min_angle(&pole) < 0.05 {
        let mut cands: Vec<Vector3<f64>> = Vec::new();
        for x in [-1.0f64, 0.0, 1.0] {
            for y in [-1.0f64, 0.0, 1.0] {
                for z in [-1.0f64, 0.0, 1.0] {
                    let v = Vector3::new(x, y, z);
                    if v.norm() > 0.0 {
                        cands.push(v.normalize());
                    }
                }
            }
        }
        let mut best = (min_angle(&pole), pole);
        for c in cands {
            let a = min_angle(&c);
            if a > best.0 {
                best = (a, c);
            }
        }
        pole = best.1;
    }
    pole
}

fn stereo_project(p: &Vector3<f64>, pole: &Vector3<f64>, e1: &Vector3<f64>, e2: &Vector3<f64>) -> Vector2<f64> {
    let denom = 1.0 - p.dot(pole);
    Vector2::new(p.dot(e1) / denom, p.dot(e2) / denom)
}

fn stereo_unproject(q: &Vector2<f64>, pole: &Vector3<f64>, e1: &Vector3<f64>, e2: &Vector3<f64>) -> Vector3<f64> {
    let r2 = q.norm_squared();
    let denom = 1.0 + r2;
    (e1 * (2.0 * q.x) + e2 * (2.0 * q.y) + pole * (r2 - 1.0)) / denom
}

fn min_triangle_angle(points: &[Vector2<f64>; 3]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..3 {
        let a = points[i];
        let b = points[(i + 1) % 3];
        let c = points[(i + 2) % 3];
        let u = (b - a).normalize();
        let v = (c - a).normalize();
        best = best.min(u.dot(&v).clamp(-1.0, 1.0).acos());
    }
    best
}

enum TriOutcome {
    Patch(TetPatch),
    Refine(Vec<(usize, usize, usize)>),
}

/// Derive the shared-curve segment to subdivide from the two endpoint keys
/// of an offending chart segment.
fn refine_request_for(
    faces: &[FaceData],
    a: &VertexKey,
    b: &VertexKey,
) -> Option<(usize, usize, usize)> {
    match (*a, *b) {
        (
            VertexKey::FaceCurve { face, curve, idx: i },
            VertexKey::FaceCurve {
                face: f2,
                curve: c2,
                idx: j,
            },
        ) if face == f2 && curve == c2 => {
            let n = faces[face].curves[curve].vertices.len();
            if i.abs_diff(j) == 1 {
                Some((face, curve, i.min(j)))
            } else if i.min(j) == 0 && i.max(j) == n - 1 && faces[face].curves[curve].closed {
                Some((face, curve, n - 1))
            } else {
                None
            }
        }
        (VertexKey::EdgeRoot { .. }, VertexKey::FaceCurve { face, curve, idx })
        | (VertexKey::FaceCurve { face, curve, idx }, VertexKey::EdgeRoot { .. }) => {
            let n = faces[face].curves[curve].vertices.len();
            if idx == 1 {
                Some((face, curve, 0))
            } else if idx == n - 2 {
                Some((face, curve, n - 2))
            } else {
                None
            }
        }
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn triangulate_region(
    faces: &[FaceData],
    ti: usize,
    field: &LinearTensorField,
    boundary_loops: &[Vec<BoundaryVertex>],
    mu: f64,
    neutral: bool,
    inside: &impl Fn(&Vector3<f64>) -> bool,
    opts: &ExtractOptions,
) -> Result<TriOutcome> {
    // Collect boundary vertices, deduplicating by key *and* manifold side.
    let mut verts: Vec<PatchVertex> = Vec::new();
    let mut vert_index: HashMap<(VertexKey, bool), usize> = HashMap::new();
    let mut loops_idx: Vec<Vec<usize>> = Vec::new();
    let mut all_dirs: Vec<Vector3<f64>> = Vec::new();
    for lp in boundary_loops {
        let mut cur = Vec::with_capacity(lp.len());
        for bv in lp {
            // Antipodal twins share the key but are distinct chart points;
            // disambiguate by the hemisphere of v2 relative to its own key
            // entry.
            let mut side = true;
            let idx = loop {
                match vert_index.get(&(bv.key, side)) {
                    Some(&i) => {
                        if (verts[i].v2 - bv.v2).norm() < 1e-9 {
                            break i;
                        } else if side {
                            side = false;
                            continue;
                        } else {
                            // same key, two sides exhausted: treat as the
                            // second side regardless
                            break i;
                        }
                    }
                    None => {
                        let i = verts.len();
                        vert_index.insert((bv.key, side), i);
                        verts.push(PatchVertex {
                            key: bv.key,
                            v2: bv.v2,
                            position: bv.position,
                            tensor: bv.tensor,
                            sign: bv.sign,
                            on_arc: bv.on_arc,
                            on_boundary: true,
                        });
                        all_dirs.push(bv.v2);
                        break i;
                    }
                }
            };
            if cur.last() != Some(&idx) {
                cur.push(idx);
            }
        }
        if cur.len() > 1 && cur.first() == cur.last() {
            cur.pop();
        }
        if cur.len() >= 2 {
            loops_idx.push(cur);
        }
    }
    if loops_idx.is_empty() {
        return Ok(TriOutcome::Patch(TetPatch {
            tet: ti,
            ..Default::default()
        }));
    }

    let pole = stereographic_pole(&all_dirs);
    let e1 = crate::tensor::smallest_axis_tangent(&pole);
    let e2 = pole.cross(&e1);

    let mut chart: Vec<Vector2<f64>> = verts
        .iter()
        .map(|v| stereo_project(&v.v2, &pole, &e1, &e2))
        .collect();

    // Nudge coincident chart points (neutral singular pairs project to the
    // same spot) apart along their loop neighbors.
    for li in 0..loops_idx.len() {
        let lp = loops_idx[li].clone();
        let n = lp.len();
        for w in 0..n {
            for w2 in (w + 1)..n {
                let (a, b) = (lp[w], lp[w2]);
                if a != b && (chart[a] - chart[b]).norm() < 1e-12 {
                    let next = chart[lp[(w + 1) % n]];
                    let prev = chart[lp[(w2 + 1) % n]];
                    let da = (next - chart[a]) * 1e-6;
                    let db = (prev - chart[b]) * 1e-6;
                    chart[a] += da;
                    chart[b] += db;
                }
            }
        }
    }

    // Boundary chords must not intersect each other; when two chains pass
    // closer than their sampling can resolve, request subdivision of the
    // shared curves and retry the whole pass.
    {
        struct Seg {
            a: Vector2<f64>,
            b: Vector2<f64>,
            ka: usize,
            kb: usize,
        }
        let mut segs: Vec<Seg> = Vec::new();
        for lp in &loops_idx {
            let n = lp.len();
            for w in 0..n {
                let (ia, ib) = (lp[w], lp[(w + 1) % n]);
                if ia != ib {
                    segs.push(Seg {
                        a: chart[ia],
                        b: chart[ib],
                        ka: ia,
                        kb: ib,
                    });
                }
            }
        }
        let proper_cross = |p: &Seg, q: &Seg| -> bool {
            if p.ka == q.ka || p.ka == q.kb || p.kb == q.ka || p.kb == q.kb {
                return false; // shared endpoint
            }
            let cross2 = |o: Vector2<f64>, u: Vector2<f64>, v: Vector2<f64>| {
                (u.x - o.x) * (v.y - o.y) - (u.y - o.y) * (v.x - o.x)
            };
            let d1 = cross2(q.a, q.b, p.a);
            let d2 = cross2(q.a, q.b, p.b);
            let d3 = cross2(p.a, p.b, q.a);
            let d4 = cross2(p.a, p.b, q.b);
            (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0)
        };
        let mut requests: Vec<(usize, usize, usize)> = Vec::new();
        for i in 0..segs.len() {
            for j in (i + 1)..segs.len() {
                if proper_cross(&segs[i], &segs[j]) {
                    for s in [&segs[i], &segs[j]] {
                        if let Some(r) =
                            refine_request_for(faces, &verts[s.ka].key, &verts[s.kb].key)
                        {
                            requests.push(r);
                        }
                    }
                }
            }
        }
        if !requests.is_empty() {
            return Ok(TriOutcome::Refine(requests));
        }
    }

    // median boundary spacing in the chart's spherical sense
    let mut spacings: Vec<f64> = Vec::new();
    for lp in &loops_idx {
        for w in 0..lp.len() {
            let a = verts[lp[w]].v2;
            let b = verts[lp[(w + 1) % lp.len()]].v2;
            spacings.push(a.dot(&b).clamp(-1.0, 1.0).acos());
        }
    }
    spacings.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let h_b = spacings[spacings.len() / 2].max(1e-4);

    // first pass: boundary-only CDT for the quality metric
    let membership = |v2: &Vector3<f64>| -> bool {
        match lift_disambiguated(field, v2, mu) {
            Ok(Some(l)) => inside(&l.position),
            _ => false,
        }
    };
    let (tris1, angle1) = run_cdt(&chart, &loops_idx, &verts, &[], &pole, &e1, &e2, &membership)?;
    let _ = tris1;

    // interior candidates from the quad parameterization
    let spacing = h_b * opts.interior_spacing_factor;
    let n_theta = ((2.0 * std::f64::consts::PI / spacing).ceil() as usize).clamp(8, 256);
    let n_eta = ((std::f64::consts::PI / spacing).ceil() as usize).clamp(4, 128);
    let mut interior: Vec<(Vector3<f64>, field::LiftedPoint)> = Vec::new();
    if !(neutral && field.char_eigenframe().lambda[0] - field.char_eigenframe().lambda[1] < 1e-10)
    {
        for i in 0..n_theta {
            for j in 1..n_eta {
                let th = 2.0 * std::f64::consts::PI * i as f64 / n_theta as f64;
                let eta = std::f64::consts::PI * j as f64 / n_eta as f64;
                let d = field::quad_param(field, th, eta);
                // margin from boundary samples and pole
                if d.dot(&pole) > (0.05f64).cos() {
                    continue;
                }
                let too_close = verts
                    .iter()
                    .any(|v| v.v2.dot(&d) > (0.45 * spacing).cos());
                if too_close {
                    continue;
                }
                let Ok(Some(l)) = lift_disambiguated(field, &d, mu) else {
                    continue;
                };
                if !inside(&l.position) {
                    continue;
                }
                interior.push((d, l));
            }
        }
    }

    let (tris2, angle2) = run_cdt(
        &chart,
        &loops_idx,
        &verts,
        &interior,
        &pole,
        &e1,
        &e2,
        &membership,
    )?;

    // assemble the patch: boundary verts + used interior verts
    let mut patch_vertices = verts;
    let mut interior_map: HashMap<usize, usize> = HashMap::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for t in &tris2 {
        let mut tri = [0usize; 3];
        for (k, &ref_id) in t.iter().enumerate() {
            tri[k] = match ref_id {
                CdtRef::Boundary(i) => i,
                CdtRef::Interior(j) => *interior_map.entry(j).or_insert_with(|| {
                    let (d, l) = &interior[j];
                    let idx = patch_vertices.len();
                    patch_vertices.push(PatchVertex {
                        key: VertexKey::Interior { tet: ti, idx: j },
                        v2: *d,
                        position: l.position,
                        tensor: l.tensor,
                        sign: l.sign,
                        on_arc: false,
                        on_boundary: false,
                    });
                    idx
                }),
            };
        }
        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
            continue;
        }
        // orient along the sheet normal
        let (pa, pb, pc) = (
            patch_vertices[tri[0]].position,
            patch_vertices[tri[1]].position,
            patch_vertices[tri[2]].position,
        );
        let centroid = (pa + pb + pc) / 3.0;
        let nrm = (pb - pa).cross(&(pc - pa));
        let g = field.mode_gradient(&centroid);
        let sgn = if patch_vertices[tri[0]].sign < 0 { -1.0 } else { 1.0 };
        if nrm.dot(&(g * sgn)) < 0.0 {
            tri.swap(1, 2);
        }
        triangles.push(tri);
    }

    Ok(TriOutcome::Patch(TetPatch {
        tet: ti,
        vertices: patch_vertices,
        triangles,
        min_angle_boundary_only: angle1,
        min_angle_refined: angle2,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CdtRef {
    Boundary(usize),
    Interior(usize),
}

#[allow(clippy::too_many_arguments)]
fn run_cdt(
    chart: &[Vector2<f64>],
    loops_idx: &[Vec<usize>],
    verts: &[PatchVertex],
    interior: &[(Vector3<f64>, field::LiftedPoint)],
    pole: &Vector3<f64>,
    e1: &Vector3<f64>,
    e2: &Vector3<f64>,
    membership: &impl Fn(&Vector3<f64>) -> bool,
) -> Result<(Vec<[CdtRef; 3]>, f64)> {
    let _ = verts;
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::new();
    let mut handle_of: HashMap<usize, spade::handles::FixedVertexHandle> = HashMap::new();
    let mut ref_of: HashMap<usize, CdtRef> = HashMap::new();
    let insert_pt = |cdt: &mut ConstrainedDelaunayTriangulation<Point2<f64>>,
                     q: Vector2<f64>|
     -> Result<spade::handles::FixedVertexHandle> {
        cdt.insert(Point2::new(q.x, q.y))
            .map_err(|e| Error::NonClosedBoundary(format!("chart insertion failed: {e:?}")))
    };
    for lp in loops_idx {
        for &vi in lp {
            if let std::collections::hash_map::Entry::Vacant(e) = handle_of.entry(vi) {
                let h = insert_pt(&mut cdt, chart[vi])?;
                e.insert(h);
                ref_of.insert(h.index(), CdtRef::Boundary(vi));
            }
        }
    }
    for lp in loops_idx {
        let n = lp.len();
        for w in 0..n {
            let (a, b) = (lp[w], lp[(w + 1) % n]);
            if a == b {
                continue;
            }
            let (ha, hb) = (handle_of[&a], handle_of[&b]);
            if ha == hb {
                continue;
            }
            if cdt.can_add_constraint(ha, hb) {
                cdt.add_constraint(ha, hb);
            } else {
                if std::env::var("MODESURF_CHART_DEBUG").is_ok() {
                    let mut s = String::new();
                    for lp in loops_idx {
                        for &vi in lp {
                            s.push_str(&format!(
                                "{} {} {:?} {:?}\n",
                                chart[vi].x, chart[vi].y, verts[vi].key, verts[vi].v2
                            ));
                        }
                        s.push_str("---\n");
                    }
                    let _ = std::fs::write("/tmp/chart_debug.txt", s);
                }
                return Err(Error::NonClosedBoundary(
                    "region boundary self-intersects in the chart".into(),
                ));
            }
        }
    }
    for (j, (d, _)) in interior.iter().enumerate() {
        let q = stereo_project(d, pole, e1, e2);
        let h = insert_pt(&mut cdt, q)?;
        ref_of.entry(h.index()).or_insert(CdtRef::Interior(j));
    }

    let mut out = Vec::new();
    let mut min_angle = f64::INFINITY;
    for face in cdt.inner_faces() {
        let vs = face.vertices();
        let pts: Vec<Vector2<f64>> = vs
            .iter()
            .map(|v| {
                let p = v.position();
                Vector2::new(p.x, p.y)
            })
            .collect();
        let centroid2 = (pts[0] + pts[1] + pts[2]) / 3.0;
        let c3 = stereo_unproject(&centroid2, pole, e1, e2).normalize();
        if !membership(&c3) {
            continue;
        }
        let mut refs = [CdtRef::Boundary(0); 3];
        let mut ok = true;
        for (k, v) in vs.iter().enumerate() {
            match ref_of.get(&v.fix().index()) {
                Some(&r) => refs[k] = r,
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        min_angle = min_angle.min(min_triangle_angle(&[pts[0], pts[1], pts[2]]));
        out.push(refs);
    }
    if !min_angle.is_finite() {
        min_angle = 0.0;
    }
    Ok((out, min_angle))
}

fn interior_members_exist(
    field: &LinearTensorField,
    inside: &impl Fn(&Vector3<f64>) -> bool,
    mu: f64,
) -> bool {
    for i in 0..24 {
        for j in 1..12 {
            let th = 2.0 * std::f64::consts::PI * i as f64 / 24.0;
            let eta = std::f64::consts::PI * j as f64 / 12.0;
            let d = field::quad_param(field, th, eta);
            if let Ok(Some(l)) = lift_disambiguated(field, &d, mu) {
                if inside(&l.position) {
                    return true;
                }
            }
        }
    }
    false
}

/// Sanity tolerance checks used by tests and audits.
pub fn patch_mode_residual(patch: &TetPatch, mu: f64) -> f64 {
    let mut worst = 0.0f64;
    for v in &patch.vertices {
        if let Ok(m) = crate::tensor::mode(&v.tensor) {
            worst = worst.max((m.abs() - mu).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn theta_guard() {
        // extraction rejects out-of-range mode values
        let ds = synth::synth_field(synth::SynthKind::SingleLinear, 3, 1).unwrap();
        let mesh = ds.to_tet_mesh().unwrap();
        assert!(extract(&mesh, 1.5, false, &ExtractOptions::default()).is_err());
        assert!(extract(&mesh, 0.0, false, &ExtractOptions::default()).is_err());
    }

    #[test]
    fn single_tet_extraction_smoke() {
        let field = synth::random_linear_field(17);
        let ds = synth::single_linear_box(
            &field,
            Vector3::new(-1.0, -1.0, -1.0),
            Vector3::new(1.0, 1.0, 1.0),
            2,
        )
        .unwrap();
        let mesh = ds.to_tet_mesh().unwrap();
        let ex = extract(&mesh, 0.6, false, &ExtractOptions::default()).unwrap();
        let total: usize = ex.patches.iter().map(|p| p.triangles.len()).sum();
        assert!(total > 0, "no surface extracted");
        for p in &ex.patches {
            let r = patch_mode_residual(p, 0.6);
            assert!(r < 1e-8, "patch residual {r:.3e}");
        }
    }
}
