//! Synthetic tensor-field datasets: boxes carrying a single global linear
//! field (for cross-tet seamlessness and topology tests), seeded random
//! linear fields, and piecewise-random fields.

use crate::error::{Error, Result};
use crate::field::LinearTensorField;
use crate::io::TensorMeshDataset;
use crate::tensor::{deviator, SymTensor3};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic dataset kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// One global linear field sampled on a box, every cube split into six
    /// tets; the per-tet fields all agree.
    SingleLinear,
    /// Like `SingleLinear` with a seeded random field.
    RandomLinearSeeded,
    /// Independent random tensor at every vertex.
    PiecewiseRandom,
}

pub fn random_traceless(rng: &mut impl Rng) -> SymTensor3 {
    let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
    deviator(&((m + m.transpose()) * 0.5))
}

/// Seeded random linear field with a well-conditioned coefficient set.
pub fn random_linear_field(seed: u64) -> LinearTensorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let f = LinearTensorField::new(
            random_traceless(&mut rng),
            random_traceless(&mut rng),
            random_traceless(&mut rng),
            random_traceless(&mut rng),
        );
        match f {
            Ok(f) => return f,
            Err(_) => continue,
        }
    }
}

/// Tetrahedralize the box [lo, hi]³ with `resolution` cubes per side, six
/// tets per cube (Kuhn split: conforming across cube faces), tensors from
/// `eval` at the grid vertices.
pub fn box_mesh(
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    resolution: usize,
    eval: impl Fn(&Vector3<f64>) -> SymTensor3,
) -> TensorMeshDataset {
    let n = resolution;
    let idx = |i: usize, j: usize, k: usize| (i * (n + 1) + j) * (n + 1) + k;
    let mut vertices = Vec::with_capacity((n + 1).pow(3));
    let mut tensors = Vec::with_capacity((n + 1).pow(3));
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let p = Vector3::new(
                    lo.x + (hi.x - lo.x) * i as f64 / n as f64,
                    lo.y + (hi.y - lo.y) * j as f64 / n as f64,
                    lo.z + (hi.z - lo.z) * k as f64 / n as f64,
                );
                vertices.push([p.x, p.y, p.z]);
                let t = eval(&p);
                tensors.push([t.xx, t.yy, t.zz, t.xy, t.yz, t.xz]);
            }
        }
    }
    // Kuhn subdivision: the six permutation tets share the main diagonal.
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut tets = Vec::with_capacity(6 * n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let base = [i, j, k];
                for perm in PERMS {
                    let mut c = base;
                    let v0 = idx(c[0], c[1], c[2]);
                    c[perm[0]] += 1;
                    let v1 = idx(c[0], c[1], c[2]);
                    c[perm[1]] += 1;
                    let v2 = idx(c[0], c[1], c[2]);
                    c[perm[2]] += 1;
                    let v3 = idx(c[0], c[1], c[2]);
                    tets.push([v0, v1, v2, v3]);
                }
            }
        }
    }
    TensorMeshDataset {
        vertices,
        tets,
        tensors,
        metadata: None,
    }
}

/// Generate a synthetic dataset. `resolution` counts cubes per box side.
pub fn synth_field(kind: SynthKind, seed: u64, resolution: usize) -> Result<TensorMeshDataset> {
    if resolution == 0 {
        return Err(Error::DomainError("resolution must be >= 1".into()));
    }
    let lo = Vector3::new(-1.0, -1.0, -1.0);
    let hi = Vector3::new(1.0, 1.0, 1.0);
    let mut ds = match kind {
        SynthKind::SingleLinear | SynthKind::RandomLinearSeeded => {
            let field = random_linear_field(seed);
            let mut ds = box_mesh(lo, hi, resolution, |p| field.eval(p));
            ds.metadata = Some(serde_json::json!({
                "kind": "single-linear",
                "seed": seed,
            }));
            ds
        }
        SynthKind::PiecewiseRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ds = box_mesh(lo, hi, resolution, |_| SymTensor3::ZERO);
            for t in ds.tensors.iter_mut() {
                let s = random_traceless(&mut rng);
                *t = [s.xx, s.yy, s.zz, s.xy, s.yz, s.xz];
            }
            ds.metadata = Some(serde_json::json!({
                "kind": "piecewise-random",
                "seed": seed,
            }));
            ds
        }
    };
    ds.validate()?;
    Ok(ds)
}

/// Box mesh for a prescribed linear field over explicit bounds.
pub fn single_linear_box(
    field: &LinearTensorField,
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    resolution: usize,
) -> Result<TensorMeshDataset> {
    if resolution == 0 {
        return Err(Error::DomainError("resolution must be >= 1".into()));
    }
    let mut ds = box_mesh(lo, hi, resolution, |p| field.eval(p));
    ds.metadata = Some(serde_json::json!({"kind": "single-linear-box"}));
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::characteristic_tensor;

    #[test]
    fn resolution_one_is_six_tets() {
        let ds = synth_field(SynthKind::SingleLinear, 7, 1).unwrap();
        assert_eq!(ds.tets.len(), 6);
        assert_eq!(ds.vertices.len(), 8);
        // positive volumes, conforming mesh builds
        let mesh = ds.to_tet_mesh().unwrap();
        for t in 0..6 {
            assert!(mesh.tet_volume(t).abs() > 1e-9);
        }
    }

    #[test]
    fn seeded_reproducible() {
        let a = synth_field(SynthKind::PiecewiseRandom, 42, 2).unwrap();
        let b = synth_field(SynthKind::PiecewiseRandom, 42, 2).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = synth_field(SynthKind::PiecewiseRandom, 43, 2).unwrap();
        assert_ne!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&c).unwrap()
        );
    }

    #[test]
    fn single_linear_recovers_characteristic() {
        let field = random_linear_field(5);
        let ds = synth_field(SynthKind::SingleLinear, 5, 2).unwrap();
        let mesh = ds.to_tet_mesh().unwrap();
        // Every tet reproduces the same characteristic tensor.
        for tet in 0..mesh.tets.len() {
            let f = LinearTensorField::from_tet(&mesh.tet_positions(tet), &mesh.tet_tensors(tet))
                .unwrap();
            let a = f.characteristic();
            let b = field.characteristic();
            let d = a.sub(b).norm().min(a.add(b).norm());
            assert!(d < 1e-9, "characteristic drift {d:.2e} in tet {tet}");
            // and it is orthogonal to the global coefficients
            let tb = characteristic_tensor(&field.t0, &field.tx, &field.ty, &field.tz).unwrap();
            assert!(tb.sub(b).norm().min(tb.add(b).norm()) < 1e-12);
        }
    }

    #[test]
    fn kuhn_split_is_conforming() {
        let ds = synth_field(SynthKind::SingleLinear, 9, 3).unwrap();
        let mesh = ds.to_tet_mesh().unwrap();
        // interior faces shared by exactly two tets
        let boundary = mesh
            .face_tets
            .iter()
            .filter(|(_, b)| b.is_none())
            .count();
        // box surface: 6 sides * res^2 squares * 2 triangles
        assert_eq!(boundary, 6 * 9 * 2);
    }
}
