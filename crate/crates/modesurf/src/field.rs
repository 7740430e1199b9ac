//! 3D linear tensor fields, the characteristic tensor, and the medium
//! eigenvector manifold: region classification, the asymmetric tensor
//! A(v2), complex-domain boundary arcs, neutral-surface singularities and
//! the mapping between manifold points and positions in space.

use crate::error::{Error, Result};
use crate::tensor::{
    self, eigen_decompose, eigenvalues_from_mode, inner, EigenFrame3, SymTensor3,
};
use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};

/// Tolerance on the boundary-equation residual separating Complex/Boundary/Real.
pub const BOUNDARY_TOL: f64 = 1e-10;
/// Half-width of the rejected interval around the bifurcation mode value.
pub const BIFURCATION_TOL: f64 = 1e-8;
/// Relative rank-gap threshold for the characteristic-tensor null space.
pub const RANK_GAP_TOL: f64 = 1e-8;
/// Relative residual bound for the space-mapping least-squares solve.
pub const MAP_RESIDUAL_TOL: f64 = 1e-8;
/// Maximum angle subtended by consecutive boundary-arc samples.
pub const ARC_SAMPLE_STEP: f64 = 0.02;

/// θ(μ) = arcsin(√3·tan(arcsin(μ)/3)), odd and monotone on [−1, 1].
pub fn theta_from_mode(mu: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&mu) {
        return Err(Error::DomainError(format!("mode {mu} outside [-1, 1]")));
    }
    if mu.abs() == 1.0 {
        // asin is ill-conditioned at the endpoint; the limit is exact.
        return Ok(mu.signum() * std::f64::consts::FRAC_PI_2);
    }
    let s = (3.0f64).sqrt() * (mu.asin() / 3.0).tan();
    Ok(s.clamp(-1.0, 1.0).asin())
}

/// T(x,y,z) = T0 + x·Tx + y·Ty + z·Tz with the cached characteristic tensor,
/// its eigenframe, mode and the bifurcation value μ0 = √(1−μ̄²).
#[derive(Debug, Clone)]
pub struct LinearTensorField {
    pub t0: SymTensor3,
    pub tx: SymTensor3,
    pub ty: SymTensor3,
    pub tz: SymTensor3,
    char_tensor: SymTensor3,
    char_frame: EigenFrame3,
    char_mode: f64,
    bifurcation: f64,
    scale: f64,
}

impl LinearTensorField {
    pub fn new(t0: SymTensor3, tx: SymTensor3, ty: SymTensor3, tz: SymTensor3) -> Result<Self> {
        let char_tensor = characteristic_tensor(&t0, &tx, &ty, &tz)?;
        let char_frame = eigen_decompose(&char_tensor);
        let char_mode = tensor::mode(&char_tensor)?;
        let bifurcation = (1.0 - char_mode * char_mode).max(0.0).sqrt();
        let scale = t0
            .norm()
            .max(tx.norm())
            .max(ty.norm())
            .max(tz.norm())
            .max(f64::MIN_POSITIVE);
        Ok(LinearTensorField {
            t0,
            tx,
            ty,
            tz,
            char_tensor,
            char_frame,
            char_mode,
            bifurcation,
            scale,
        })
    }

    /// Field from the four vertices of a tetrahedron with tensors given at
    /// the vertices (linear interpolation).
    pub fn from_tet(positions: &[Vector3<f64>; 4], tensors: &[SymTensor3; 4]) -> Result<Self> {
        // Solve for Tx,Ty,Tz from the differences, then T0.
        let d = Matrix3::from_columns(&[
            positions[1] - positions[0],
            positions[2] - positions[0],
            positions[3] - positions[0],
        ]);
        let inv = d
            .try_inverse()
            .ok_or_else(|| Error::DomainError("degenerate tetrahedron".into()))?;
        let g1 = tensors[1].sub(&tensors[0]);
        let g2 = tensors[2].sub(&tensors[0]);
        let g3 = tensors[3].sub(&tensors[0]);
        let comp = |pick: fn(&SymTensor3) -> f64| -> Vector3<f64> {
            inv.transpose() * Vector3::new(pick(&g1), pick(&g2), pick(&g3))
        };
        let cxx = comp(|t| t.xx);
        let cyy = comp(|t| t.yy);
        let czz = comp(|t| t.zz);
        let cxy = comp(|t| t.xy);
        let cyz = comp(|t| t.yz);
        let cxz = comp(|t| t.xz);
        let build = |k: usize| {
            SymTensor3::new_traceless(cxx[k], cyy[k], czz[k], cxy[k], cyz[k], cxz[k])
        };
        let (tx, ty, tz) = (build(0), build(1), build(2));
        let p0 = positions[0];
        let t0 = tensors[0]
            .sub(&tx.scale(p0.x))
            .sub(&ty.scale(p0.y))
            .sub(&tz.scale(p0.z));
        Self::new(t0, tx, ty, tz)
    }

    pub fn eval(&self, p: &Vector3<f64>) -> SymTensor3 {
        self.t0
            .add(&self.tx.scale(p.x))
            .add(&self.ty.scale(p.y))
            .add(&self.tz.scale(p.z))
    }

    pub fn characteristic(&self) -> &SymTensor3 {
        &self.char_tensor
    }

    pub fn char_eigenframe(&self) -> &EigenFrame3 {
        &self.char_frame
    }

    pub fn char_mode(&self) -> f64 {
        self.char_mode
    }

    /// μ0 = √(1 − μ̄²): mode value at which the generalized mode surface
    /// switches between torus and double-torus topology.
    pub fn bifurcation_mode(&self) -> f64 {
        self.bifurcation
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mode_at(&self, p: &Vector3<f64>) -> Result<f64> {
        tensor::mode_scaled(&self.eval(p), self.scale)
    }

    /// Analytic gradient of the mode function at `p`.
    pub fn mode_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let t = self.eval(p);
        let q = t.norm_squared();
        let d = t.det();
        let k = 3.0 * 6.0f64.sqrt();
        let qm32 = q.powf(-1.5);
        let qm52 = q.powf(-2.5);
        let tm = t.to_matrix();
        let adj = adjugate(&tm);
        let dirs = [&self.tx, &self.ty, &self.tz];
        Vector3::from_fn(|i, _| {
            let ti = dirs[i];
            let dd = (adj * ti.to_matrix()).trace();
            let dq = 2.0 * inner(&t, ti);
            k * (dd * qm32 - 1.5 * d * qm52 * dq)
        })
    }

    /// Analytic Hessian of the mode function at `p`.
    pub fn mode_hessian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        let t = self.eval(p);
        let q = t.norm_squared();
        let d = t.det();
        let k = 3.0 * 6.0f64.sqrt();
        let qm32 = q.powf(-1.5);
        let qm52 = q.powf(-2.5);
        let qm72 = q.powf(-3.5);
        let tm = t.to_matrix();
        let adj = adjugate(&tm);
        let dirs = [&self.tx, &self.ty, &self.tz];
        let dd = Vector3::from_fn(|i, _| (adj * dirs[i].to_matrix()).trace());
        let dq = Vector3::from_fn(|i, _| 2.0 * inner(&t, dirs[i]));
        Matrix3::from_fn(|i, j| {
            let (mi, mj) = (dirs[i].to_matrix(), dirs[j].to_matrix());
            // D adj for traceless arguments: -tr(T·Tj)·I + T·Tj + Tj·T
            let hd = 2.0 * (tm * mi * mj).trace() - inner(&t, dirs[j]) * mi.trace();
            let hq = 2.0 * inner(dirs[i], dirs[j]);
            k * (hd * qm32 - 1.5 * qm52 * (dd[i] * dq[j] + dq[i] * dd[j]) - 1.5 * d * qm52 * hq
                + 3.75 * d * qm72 * dq[i] * dq[j])
        })
    }
}

fn adjugate(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |i0: usize, i1: usize, j0: usize, j1: usize| {
        m[(i0, j0)] * m[(i1, j1)] - m[(i0, j1)] * m[(i1, j0)]
    };
    // cofactor matrix transposed
    Matrix3::new(
        c(1, 2, 1, 2),
        -c(0, 2, 1, 2),
        c(0, 1, 1, 2),
        -c(1, 2, 0, 2),
        c(0, 2, 0, 2),
        -c(0, 1, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 0, 1),
        c(0, 1, 0, 1),
    )
}

/// Unit tensor orthogonal to all four coefficient tensors with det ≤ 0,
/// found from the null space of the 4×5 deviator-coordinate matrix.
pub fn characteristic_tensor(
    t0: &SymTensor3,
    tx: &SymTensor3,
    ty: &SymTensor3,
    tz: &SymTensor3,
) -> Result<SymTensor3> {
    let rows = [t0, tx, ty, tz].map(|t| t.deviator_coords());
    let m = SMatrix::<f64, 4, 5>::from_fn(|i, j| rows[i][j]);
    let svd = m.svd(true, true);
    let sv = svd.singular_values;
    let smax = sv[0].max(f64::MIN_POSITIVE);
    if sv[3] <= RANK_GAP_TOL * smax {
        return Err(Error::DegenerateField(sv[3] / smax));
    }
    let vt = svd.v_t.unwrap();
    // Right-singular vectors span only the row space (4 of 5 dims); the null
    // direction is the unit vector orthogonal to all of them.
    let mut null = orthogonal_complement(&vt);
    let tb = SymTensor3::from_deviator_coords(&[null[0], null[1], null[2], null[3], null[4]]);
    let det = tb.det();
    let flip = if det.abs() < 1e-12 {
        // det == 0 edge: fix sign by the largest-magnitude coordinate.
        let mut k = 0;
        for i in 1..5 {
            if null[i].abs() > null[k].abs() {
                k = i;
            }
        }
        null[k] < 0.0
    } else {
        det > 0.0
    };
    let tb = if flip { tb.scale(-1.0) } else { tb };
    // Re-normalize to unit magnitude.
    Ok(tb.scale(1.0 / tb.norm()))
}

fn orthogonal_complement(rows: &SMatrix<f64, 4, 5>) -> SVector<f64, 5> {
    // Deterministic Gram-Schmidt of the seed axis least represented in rows.
    let mut best = 0;
    let mut best_mass = f64::INFINITY;
    for j in 0..5 {
        let mass: f64 = (0..4).map(|i| rows[(i, j)] * rows[(i, j)]).sum();
        if mass < best_mass {
            best_mass = mass;
            best = j;
        }
    }
    let mut v = SVector::<f64, 5>::zeros();
    v[best] = 1.0;
    for i in 0..4 {
        let r = rows.row(i).transpose();
        v -= r * r.dot(&v);
    }
    v.normalize()
}

/// Region of the medium eigenvector manifold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Complex,
    Boundary,
    RealTwoPositive,
    RealTwoNegative,
    RealMixed,
}

/// A classified point of the medium eigenvector manifold.
#[derive(Debug, Clone)]
pub struct ManifoldPoint {
    pub v2: Vector3<f64>,
    pub mu: f64,
    pub theta: f64,
    pub gamma_d: f64,
    pub gamma_r: f64,
    pub gamma_s: f64,
    pub region: Region,
    /// Eigenvector of A for the larger eigenvalue, embedded in 3D (⊥ v2).
    pub a_major: Option<Vector3<f64>>,
    /// Eigenvector of A for the smaller eigenvalue, embedded in 3D (⊥ v2).
    pub a_minor: Option<Vector3<f64>>,
}

/// Deterministic right-handed tangent frame (b1, b2) with b1×b2 = n.
pub fn tangent_frame(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let b1 = tensor::smallest_axis_tangent(n);
    let b2 = n.cross(&b1);
    (b1, b2)
}

/// The 2D asymmetric tensor A(v2) = R_{θ/2+π/4}·T̄′(v2)·R_{θ/2−π/4} in the
/// deterministic tangent frame; also returns the frame.
pub fn asym_field(
    field: &LinearTensorField,
    v2: &Vector3<f64>,
    mu: f64,
) -> Result<(Matrix2<f64>, Vector3<f64>, Vector3<f64>)> {
    let theta = theta_from_mode(mu)?;
    let (b1, b2) = tangent_frame(v2);
    let tb = field.characteristic();
    let tp = Matrix2::new(
        b1.dot(&tb.apply(&b1)),
        b1.dot(&tb.apply(&b2)),
        b2.dot(&tb.apply(&b1)),
        b2.dot(&tb.apply(&b2)),
    );
    let rot = |phi: f64| {
        let (s, c) = phi.sin_cos();
        Matrix2::new(c, -s, s, c)
    };
    let a = rot(theta / 2.0 + std::f64::consts::FRAC_PI_4)
        * tp
        * rot(theta / 2.0 - std::f64::consts::FRAC_PI_4);
    Ok((a, b1, b2))
}

/// Discriminant γs² − γr² of A(v2); the boundary equation's left-hand side.
/// Negative in the complex domain, zero on its boundary.
pub fn boundary_residual(field: &LinearTensorField, v2: &Vector3<f64>, mu: f64) -> Result<f64> {
    let theta = theta_from_mode(mu)?;
    let tb = field.characteristic();
    let alpha = tb.quadratic_form(v2);
    let tv = tb.apply(v2);
    let beta = tv.dot(&tv); // v2ᵀT̄²v2
    let c = theta.cos();
    Ok(0.5 - beta + 0.25 * c * c * alpha * alpha)
}

fn eig2(a: &Matrix2<f64>) -> Option<(f64, Vector2<f64>, f64, Vector2<f64>)> {
    eig2_tol(a, 0.0)
}

/// Like [`eig2`] but treats discriminants within `tol` of zero as repeated
/// (the defective boundary case).
fn eig2_tol(a: &Matrix2<f64>, tol: f64) -> Option<(f64, Vector2<f64>, f64, Vector2<f64>)> {
    let tr = a[(0, 0)] + a[(1, 1)];
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let disc = (tr * tr / 4.0 - det).max(if tr * tr / 4.0 - det >= -tol { 0.0 } else { -1.0 });
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let l1 = tr / 2.0 + sq;
    let l2 = tr / 2.0 - sq;
    let evec = |l: f64| -> Vector2<f64> {
        let r1 = Vector2::new(a[(0, 0)] - l, a[(0, 1)]);
        let r2 = Vector2::new(a[(1, 0)], a[(1, 1)] - l);
        let r = if r1.norm_squared() >= r2.norm_squared() {
            r1
        } else {
            r2
        };
        if r.norm() < 1e-300 {
            return Vector2::new(1.0, 0.0);
        }
        Vector2::new(-r.y, r.x).normalize()
    };
    Some((l1, evec(l1), l2, evec(l2)))
}

/// One surface point recovered from the manifold.
#[derive(Debug, Clone, Copy)]
pub struct LiftedPoint {
    pub position: Vector3<f64>,
    pub tensor: SymTensor3,
    /// +1 on the +μ sheet, −1 on the −μ sheet.
    pub sign: i8,
    /// Dominant eigenvector of the tensor (eigenvector of A, embedded).
    pub dominant: Vector3<f64>,
    /// Least-squares residual of the mapping solve (relative).
    pub residual: f64,
}

/// Map an A-eigenvector direction to the surface: builds the candidate
/// tensor with `e` in the dominant slot and solves T(x) = s·t by least
/// squares over the five deviator coordinates. The sign of s determines the
/// sheet: s < 0 means the point lies on the −μ sheet (the tensor is −t).
fn lift_eigenvector(
    field: &LinearTensorField,
    v2: &Vector3<f64>,
    e: &Vector3<f64>,
    mu: f64,
) -> Result<LiftedPoint> {
    let lam = eigenvalues_from_mode(mu)?;
    let w3 = v2.cross(e).normalize();
    let t = SymTensor3::from_eigen(lam, [e, v2, &w3]);
    let (sol, rel_res) = solve_map(field, &t);
    if rel_res > MAP_RESIDUAL_TOL {
        return Err(Error::NoSolution(rel_res));
    }
    let s = sol[3];
    if s.abs() < 1e-300 {
        return Err(Error::NoSolution(f64::INFINITY));
    }
    let sign = if s > 0.0 { 1 } else { -1 };
    let position = Vector3::new(sol[0], sol[1], sol[2]);
    Ok(LiftedPoint {
        position,
        tensor: t.scale(s * field.scale()),
        sign,
        dominant: *e,
        residual: rel_res,
    })
}

/// Least squares for T(x,y,z) = s·t in scaled units. Returns (x,y,z,s·scale⁻¹… )
/// — positions unscaled, s in field-scale units — and the relative residual.
fn solve_map(field: &LinearTensorField, t: &SymTensor3) -> (SVector<f64, 4>, f64) {
    let sc = 1.0 / field.scale();
    let c0 = field.t0.scale(sc).deviator_coords();
    let cx = field.tx.scale(sc).deviator_coords();
    let cy = field.ty.scale(sc).deviator_coords();
    let cz = field.tz.scale(sc).deviator_coords();
    let ct = t.deviator_coords();
    let m = SMatrix::<f64, 5, 4>::from_fn(|i, j| match j {
        0 => cx[i],
        1 => cy[i],
        2 => cz[i],
        _ => -ct[i],
    });
    let rhs = SVector::<f64, 5>::from_fn(|i, _| -c0[i]);
    let svd = m.svd(true, true);
    let sol = svd.solve(&rhs, 1e-14).unwrap_or_else(|_| SVector::zeros());
    let res = (m * sol - rhs).norm();
    let denom = rhs.norm().max(sol.norm()).max(1.0);
    (sol, res / denom)
}

/// The disambiguated surface point of `v2`: the one whose dominant
/// eigenvector is the major eigenvector of A(v2). Returns None in the
/// complex domain; at boundary points the repeated eigenvector is used.
pub fn lift_disambiguated(
    field: &LinearTensorField,
    v2: &Vector3<f64>,
    mu: f64,
) -> Result<Option<LiftedPoint>> {
    let (a, b1, b2) = asym_field(field, v2, mu)?;
    match eig2_tol(&a, BOUNDARY_TOL) {
        None => Ok(None),
        Some((_, e1, _, _)) => {
            let e = (b1 * e1.x + b2 * e1.y).normalize();
            Ok(Some(lift_eigenvector(field, v2, &e, mu)?))
        }
    }
}

/// Classify `v2` for mode value `mu`: region membership by the discriminant
/// of A(v2), with the three real sub-regions resolved by lifting both
/// eigenvector candidates and reading their mode signs.
pub fn classify(field: &LinearTensorField, v2: &Vector3<f64>, mu: f64) -> Result<ManifoldPoint> {
    let theta = theta_from_mode(mu)?;
    let (a, b1, b2) = asym_field(field, v2, mu)?;
    let gamma_d = 0.5 * (a[(0, 0)] + a[(1, 1)]);
    let gamma_r = 0.5 * (a[(1, 0)] - a[(0, 1)]);
    let gs2 = 0.25 * (a[(0, 0)] - a[(1, 1)]).powi(2) + 0.25 * (a[(0, 1)] + a[(1, 0)]).powi(2);
    let gamma_s = gs2.max(0.0).sqrt();
    let disc = gs2 - gamma_r * gamma_r;

    let mut mp = ManifoldPoint {
        v2: *v2,
        mu,
        theta,
        gamma_d,
        gamma_r,
        gamma_s,
        region: Region::Complex,
        a_major: None,
        a_minor: None,
    };
    if disc < -BOUNDARY_TOL {
        return Ok(mp);
    }
    if disc.abs() <= BOUNDARY_TOL {
        mp.region = Region::Boundary;
        if let Some((_, e1, _, _)) = eig2(&a) {
            let e = (b1 * e1.x + b2 * e1.y).normalize();
            mp.a_major = Some(e);
            mp.a_minor = Some(e);
        }
        return Ok(mp);
    }
    let (_, e1, _, e2) = eig2(&a).expect("positive discriminant");
    let emaj = (b1 * e1.x + b2 * e1.y).normalize();
    let emin = (b1 * e2.x + b2 * e2.y).normalize();
    mp.a_major = Some(emaj);
    mp.a_minor = Some(emin);
    let p_maj = lift_eigenvector(field, v2, &emaj, mu)?;
    let p_min = lift_eigenvector(field, v2, &emin, mu)?;
    mp.region = match (p_maj.sign, p_min.sign) {
        (1, 1) => Region::RealTwoPositive,
        (-1, -1) => Region::RealTwoNegative,
        _ => Region::RealMixed,
    };
    Ok(mp)
}

/// Map a classified manifold point back to space, selecting the +μ or −μ
/// point. When both candidate points carry the requested sign, the one
/// parameterized by this orientation of v2 (the major eigenvector of A) is
/// returned. Fails with [`Error::NoSolution`] when the requested sign is not
/// realized at this point or the solve is inconsistent.
pub fn map_to_space(
    field: &LinearTensorField,
    p: &ManifoldPoint,
    sign: i8,
) -> Result<(Vector3<f64>, SymTensor3)> {
    if p.region == Region::Complex {
        return Err(Error::DomainError(
            "complex-domain points have no surface point".into(),
        ));
    }
    let candidates: &[Option<Vector3<f64>>] = if p.region == Region::Boundary {
        &[p.a_major]
    } else {
        &[p.a_major, p.a_minor]
    };
    for e in candidates.iter().flatten() {
        let lifted = lift_eigenvector(field, &p.v2, e, p.mu)?;
        if lifted.sign == sign.signum() || p.region == Region::Boundary {
            return Ok((lifted.position, lifted.tensor));
        }
    }
    Err(Error::NoSolution(f64::INFINITY))
}

/// Resolve the orientation ambiguity of a medium eigenvector: of ±v2, pick
/// the one whose major A-eigenvector gives the dominant eigenvector of the
/// tensor, converting the two-to-two correspondence into one-to-one.
pub fn disambiguate_v2(
    field: &LinearTensorField,
    frame: &EigenFrame3,
    mode_signed: f64,
) -> Result<Vector3<f64>> {
    let v2 = frame.v[1];
    let dominant = if mode_signed >= 0.0 {
        frame.v[0]
    } else {
        frame.v[2]
    };
    let (a, b1, b2) = asym_field(field, &v2, mode_signed.abs())?;
    match eig2(&a) {
        None => Ok(v2),
        Some((_, e1, _, e2)) => {
            let emaj = b1 * e1.x + b2 * e1.y;
            let emin = b1 * e2.x + b2 * e2.y;
            if emaj.dot(&dominant).abs() >= emin.dot(&dominant).abs() {
                Ok(v2)
            } else {
                Ok(-v2)
            }
        }
    }
}

/// One octant arc of the complex domain boundary.
#[derive(Debug, Clone)]
pub struct BoundaryArc {
    /// Inclusive α-interval in the (α, β) chart.
    pub alpha_range: (f64, f64),
    /// Signs of (a, b, c) in the characteristic eigenframe.
    pub octant: [i8; 3],
    /// Samples at most [`ARC_SAMPLE_STEP`] radians apart, ordered by α.
    pub samples: Vec<ManifoldPoint>,
    /// α value of each sample (same length as `samples`).
    pub alphas: Vec<f64>,
}

/// The eight octant arcs of the complex domain boundary grouped into loops.
#[derive(Debug, Clone)]
pub struct ArcSet {
    pub arcs: Vec<BoundaryArc>,
    /// Loops as sequences of (arc index, traversed forward in α).
    pub loops: Vec<Vec<(usize, bool)>>,
    /// Endpoint edge types: true when the α-interval endpoints lie on mx=0
    /// and my=0 (pre-bifurcation), false when both lie on my=0.
    pub crosses_mx: bool,
}

struct ArcChart {
    lam: [f64; 3],
    axes: [Vector3<f64>; 3],
    vander_inv: Matrix3<f64>,
    cos2: f64,
}

impl ArcChart {
    fn new(field: &LinearTensorField, mu: f64) -> Result<Self> {
        let theta = theta_from_mode(mu)?;
        let f = field.char_eigenframe();
        let lam = f.lambda;
        let vander = Matrix3::new(
            1.0,
            1.0,
            1.0,
            lam[0],
            lam[1],
            lam[2],
            lam[0] * lam[0],
            lam[1] * lam[1],
            lam[2] * lam[2],
        );
        let vander_inv = vander
            .try_inverse()
            .ok_or(Error::DegenerateCharacteristic)?;
        Ok(ArcChart {
            lam,
            axes: f.v,
            vander_inv,
            cos2: theta.cos() * theta.cos(),
        })
    }

    fn beta(&self, alpha: f64) -> f64 {
        0.5 * (1.0 + 0.5 * self.cos2 * alpha * alpha)
    }

    fn m(&self, alpha: f64) -> Vector3<f64> {
        self.vander_inv * Vector3::new(1.0, alpha, self.beta(alpha))
    }

    fn direction(&self, alpha: f64, octant: [i8; 3]) -> Vector3<f64> {
        let m = self.m(alpha);
        let mut v = Vector3::zeros();
        for i in 0..3 {
            v += self.axes[i] * (octant[i] as f64) * m[i].max(0.0).sqrt();
        }
        v.normalize()
    }

    /// α values where the boundary curve meets the simplex edge m[idx] = 0.
    fn edge_crossings(&self, idx: usize) -> Vec<f64> {
        let others: Vec<usize> = (0..3).filter(|&i| i != idx).collect();
        let (la, lb) = (self.lam[others[0]], self.lam[others[1]]);
        // F(s) with m = s at others[0], 1−s at others[1]
        let a2 = 0.5 * self.cos2 * (la - lb) * (la - lb);
        let a1 = -2.0 * (la * la - lb * lb) + self.cos2 * (la - lb) * lb;
        let a0 = 1.0 - 2.0 * lb * lb + 0.5 * self.cos2 * lb * lb;
        crate::poly::cubic_real_roots(a0, a1, a2, 0.0)
            .into_iter()
            .filter(|s| (-1e-11..=1.0 + 1e-11).contains(s))
            .map(|s| la * s.clamp(0.0, 1.0) + lb * (1.0 - s.clamp(0.0, 1.0)))
            .collect()
    }
}

/// Boundary arcs of the complex domain for mode `mu`, grouped into loops:
/// an antipodal pair of loops before the bifurcation (μ > μ0), four loops
/// after it (μ < μ0).
pub fn boundary_arcs(field: &LinearTensorField, mu: f64) -> Result<ArcSet> {
    if !(0.0 < mu && mu < 1.0) {
        return Err(Error::DomainError(format!("mode {mu} outside (0, 1)")));
    }
    if (mu - field.bifurcation_mode()).abs() < BIFURCATION_TOL {
        return Err(Error::AtBifurcation(BIFURCATION_TOL));
    }
    let chart = ArcChart::new(field, mu)?;
    // Candidate interval endpoints: crossings with mx=0 and my=0 (mz=0 is
    // never crossed since beta < 1/2 there).
    let mut cx = chart.edge_crossings(0);
    let mut cy = chart.edge_crossings(1);
    cx.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cy.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut endpoints: Vec<(f64, usize)> = cx.iter().map(|&a| (a, 0usize)).collect();
    endpoints.extend(cy.iter().map(|&a| (a, 1usize)));
    endpoints.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    endpoints.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-13);
    // The arc inside the simplex is the interval where all m ≥ 0.
    let mut interval: Option<((f64, usize), (f64, usize))> = None;
    for w in endpoints.windows(2) {
        let mid = 0.5 * (w[0].0 + w[1].0);
        let m = chart.m(mid);
        if m.min() > -1e-10 {
            if interval.is_some() {
                return Err(Error::AtBifurcation((mu - field.bifurcation_mode()).abs()));
            }
            interval = Some((w[0], w[1]));
        }
    }
    let ((alo, tlo), (ahi, thi)) = interval.ok_or_else(|| {
        Error::DomainError(format!(
            "no complex-domain boundary interval found at mode {mu}"
        ))
    })?;
    let crosses_mx = tlo != thi;

    // Sample the quarter arc adaptively, then instantiate all eight octants.
    let mut alphas = vec![alo];
    let mut stack = vec![(alo, ahi)];
    let probe_oct = [1i8, 1, 1];
    while let Some((a, b)) = stack.pop() {
        let va = chart.direction(a, probe_oct);
        let vb = chart.direction(b, probe_oct);
        let ang = va.dot(&vb).clamp(-1.0, 1.0).acos();
        if ang > ARC_SAMPLE_STEP && (b - a) > 1e-14 * (1.0 + alo.abs() + ahi.abs()) {
            let mid = 0.5 * (a + b);
            stack.push((mid, b));
            stack.push((a, mid));
        } else {
            alphas.push(b);
        }
    }
    alphas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    alphas.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let octants: [[i8; 3]; 8] = [
        [1, 1, 1],
        [-1, 1, 1],
        [1, -1, 1],
        [-1, -1, 1],
        [1, 1, -1],
        [-1, 1, -1],
        [1, -1, -1],
        [-1, -1, -1],
    ];
    let mut arcs = Vec::with_capacity(8);
    for oct in octants {
        let mut samples = Vec::with_capacity(alphas.len());
        for &a in &alphas {
            let v2 = chart.direction(a, oct);
            samples.push(classify(field, &v2, mu)?);
        }
        arcs.push(BoundaryArc {
            alpha_range: (alo, ahi),
            octant: oct,
            samples,
            alphas: alphas.clone(),
        });
    }
    let oct_index = |s: [i8; 3]| -> usize {
        octants.iter().position(|&o| o == s).unwrap()
    };
    let loops = if crosses_mx {
        // Quarter arcs chain through both edge endpoints: 4 arcs per loop,
        // one loop per hemisphere (antipodal pair).
        let per_hemi = |c: i8| -> Vec<(usize, bool)> {
            // order chosen so consecutive arcs share endpoints:
            // endpoints alternate between the a=0 and b=0 edge points.
            vec![
                (oct_index([1, 1, c]), true),
                (oct_index([1, -1, c]), false),
                (oct_index([-1, -1, c]), true),
                (oct_index([-1, 1, c]), false),
            ]
        };
        vec![per_hemi(1), per_hemi(-1)]
    } else {
        // Both endpoints on my=0: pairs (b>0, b<0) close into loops.
        let pair = |sa: i8, sc: i8| -> Vec<(usize, bool)> {
            vec![
                (oct_index([sa, 1, sc]), true),
                (oct_index([sa, -1, sc]), false),
            ]
        };
        vec![pair(1, 1), pair(-1, 1), pair(1, -1), pair(-1, -1)]
    };
    Ok(ArcSet {
        arcs,
        loops,
        crosses_mx,
    })
}

/// A straight line in space corresponding to one parameterization singularity.
#[derive(Debug, Clone, Copy)]
pub struct SingularLine {
    /// The singular direction on the manifold (unit).
    pub direction_on_manifold: Vector3<f64>,
    /// A point on the line.
    pub point: Vector3<f64>,
    /// Unit direction of the line.
    pub line_direction: Vector3<f64>,
}

/// The two antipodal singular-direction pairs of the neutral-surface
/// parameterization, with their corresponding straight lines in space.
pub fn neutral_singularities(field: &LinearTensorField) -> Result<[SingularLine; 2]> {
    let f = field.char_eigenframe();
    let l = f.lambda;
    if l[0] - l[1] < 1e-10 || l[1] - l[2] < 1e-10 {
        return Err(Error::DegenerateCharacteristic);
    }
    let sx = ((l[0] - l[1]) / (l[0] - l[2])).sqrt();
    let sz = ((l[1] - l[2]) / (l[0] - l[2])).sqrt();
    let mut out = Vec::with_capacity(2);
    for sgn in [1.0, -1.0] {
        let v = (f.v[0] * sx + f.v[2] * (sz * sgn)).normalize();
        let line = singular_line(field, &v)?;
        out.push(line);
    }
    Ok([out[0], out[1]])
}

/// The line of points where `dir` is an eigenvector of T(x): solving
/// (I − dd ᵀ)·T(x)·d = 0, a rank-2 linear system whose solution set is a line.
fn singular_line(field: &LinearTensorField, dir: &Vector3<f64>) -> Result<SingularLine> {
    let proj = Matrix3::identity() - dir * dir.transpose();
    let cols = [
        proj * field.tx.apply(dir),
        proj * field.ty.apply(dir),
        proj * field.tz.apply(dir),
    ];
    let m = Matrix3::from_columns(&cols);
    let rhs = -(proj * field.t0.apply(dir));
    let svd = m.svd(true, true);
    let point = svd
        .solve(&rhs, 1e-10 * field.scale())
        .map_err(|_| Error::DegenerateCharacteristic)?;
    // Null direction: smallest singular value's right vector.
    let vt = svd.v_t.unwrap();
    let line_direction = Vector3::new(vt[(2, 0)], vt[(2, 1)], vt[(2, 2)]).normalize();
    Ok(SingularLine {
        direction_on_manifold: *dir,
        point,
        line_direction: tensor::fix_sign(line_direction),
    })
}

/// Quad parameterization of the medium eigenvector manifold whose only
/// irregular grid vertices are the neutral-surface singularities. The
/// result is normalized to unit length, expressed in world coordinates.
pub fn quad_param(field: &LinearTensorField, theta_param: f64, eta: f64) -> Vector3<f64> {
    let f = field.char_eigenframe();
    let l = f.lambda;
    let denom = l[2] - l[1];
    let ffac = if denom.abs() > 1e-300 {
        (2.0 * l[1] - l[2] - l[0]) / denom
    } else {
        0.0
    };
    let (ceta, seta) = (eta.cos(), eta.sin());
    let x = theta_param.cos() * (ffac * ceta * ceta + 1.0).max(0.0).sqrt();
    let y = theta_param.sin() * seta;
    let z = ceta;
    (f.v[0] * x + f.v[1] * y + f.v[2] * z).normalize()
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::Rng;

    pub fn random_traceless(rng: &mut impl Rng) -> SymTensor3 {
        let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        tensor::deviator(&((m + m.transpose()) * 0.5))
    }

    pub fn random_field(rng: &mut impl Rng) -> LinearTensorField {
        loop {
            let f = LinearTensorField::new(
                random_traceless(rng),
                random_traceless(rng),
                random_traceless(rng),
                random_traceless(rng),
            );
            if let Ok(f) = f {
                return f;
            }
        }
    }

    /// Field constructed so its characteristic tensor is exactly `target`
    /// (up to sign): Gram-Schmidt four random tensors against `target`.
    pub fn field_with_characteristic(
        rng: &mut impl Rng,
        target: &SymTensor3,
    ) -> LinearTensorField {
        loop {
            let mut basis: Vec<SymTensor3> = Vec::new();
            while basis.len() < 4 {
                let mut t = random_traceless(rng);
                let tn = target.scale(1.0 / target.norm());
                t = t.sub(&tn.scale(inner(&t, &tn)));
                for b in &basis {
                    t = t.sub(&b.scale(inner(&t, b) / b.norm_squared()));
                }
                if t.norm() > 0.05 {
                    basis.push(t);
                }
            }
            if let Ok(f) =
                LinearTensorField::new(basis[0], basis[1], basis[2], basis[3])
            {
                return f;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn theta_examples() {
        assert_relative_eq!(theta_from_mode(0.0).unwrap(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(
            theta_from_mode(1.0).unwrap(),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
        // Odd + monotone.
        let mut prev = -10.0;
        for i in 0..=100 {
            let mu = -1.0 + 2.0 * i as f64 / 100.0;
            let th = theta_from_mode(mu).unwrap();
            assert_relative_eq!(th, -theta_from_mode(-mu).unwrap(), epsilon = 1e-13);
            assert!(th > prev);
            prev = th;
        }
        // Extended-precision oracle for mu = 0.5 (40 digits).
        assert_relative_eq!(
            theta_from_mode(0.5).unwrap(),
            0.310366125225290395673503894204157111484,
            epsilon = 1e-14
        );
        assert!(theta_from_mode(1.5).is_err());
    }

    #[test]
    fn characteristic_recovery() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = SymTensor3::from_diagonal([1.0, 1.0, -2.0]).scale(1.0 / 6.0f64.sqrt());
        for _ in 0..20 {
            let f = field_with_characteristic(&mut rng, &target);
            let tb = f.characteristic();
            // Orthogonality + unit + det branch.
            for t in [&f.t0, &f.tx, &f.ty, &f.tz] {
                assert!(inner(tb, t).abs() < 1e-10);
            }
            assert_relative_eq!(tb.norm(), 1.0, epsilon = 1e-12);
            assert!(tb.det() <= 1e-12);
            // Recover target up to the sign fix (det ≤ 0 branch).
            let d = tb.sub(&target).norm().min(tb.add(&target).norm());
            assert!(d < 1e-10, "characteristic tensor not recovered: {d}");
        }
    }

    #[test]
    fn characteristic_neutral_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let target = SymTensor3::from_diagonal([1.0, 0.0, -1.0]).scale(1.0 / 2.0f64.sqrt());
        let f = field_with_characteristic(&mut rng, &target);
        let tb = f.characteristic();
        assert!(tb.det() <= 1e-12);
        let d = tb.sub(&target).norm().min(tb.add(&target).norm());
        assert!(d < 1e-9);
    }

    #[test]
    fn characteristic_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_traceless(&mut rng);
        let b = random_traceless(&mut rng);
        let c = random_traceless(&mut rng);
        let sum = b.add(&c);
        assert!(matches!(
            LinearTensorField::new(a, b, c, sum),
            Err(Error::DegenerateField(_))
        ));
    }

    #[test]
    fn gamma_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let field = random_field(&mut rng);
        let tb = field.characteristic();
        for _ in 0..200 {
            let v2 = random_unit(&mut rng);
            let mu = rng.gen_range(0.02..0.98);
            let mp = classify(&field, &v2, mu).unwrap();
            let alpha = tb.quadratic_form(&v2);
            let tv = tb.apply(&v2);
            let beta = tv.dot(&tv);
            let th = mp.theta;
            assert_relative_eq!(mp.gamma_d, -th.cos() * alpha / 2.0, epsilon = 1e-12);
            assert_relative_eq!(mp.gamma_r, -th.sin() * alpha / 2.0, epsilon = 1e-12);
            assert_relative_eq!(
                mp.gamma_s * mp.gamma_s,
                0.5 - beta + alpha * alpha / 4.0,
                epsilon = 1e-12
            );
            // Eq. 5 residual both ways.
            let direct = boundary_residual(&field, &v2, mu).unwrap();
            assert_relative_eq!(
                direct,
                mp.gamma_s * mp.gamma_s - mp.gamma_r * mp.gamma_r,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn asym_field_symmetric_at_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let field = random_field(&mut rng);
        for _ in 0..20 {
            let v2 = random_unit(&mut rng);
            let (a, _, _) = asym_field(&field, &v2, 0.0).unwrap();
            assert!((a[(0, 1)] - a[(1, 0)]).abs() < 1e-12, "γ_r must vanish");
        }
    }

    pub(super) fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n < 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn classify_matches_quadratic_oracle() {
        // Region classification agrees with the existence/count of real
        // eigenvalues of A computed by the quadratic formula.
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let field = random_field(&mut rng);
        let mut complex_seen = 0;
        let mut real_seen = 0;
        // Placement near the minor characteristic axis lands in the complex
        // domain at high mode values; mix those with uniform samples.
        let minor_axis = field.char_eigenframe().v[2];
        for k in 0..800 {
            let v2 = if k % 4 == 0 {
                (minor_axis + random_unit(&mut rng) * 0.15).normalize()
            } else {
                random_unit(&mut rng)
            };
            let mu = rng.gen_range(0.05..0.99);
            let mp = classify(&field, &v2, mu).unwrap();
            let (a, _, _) = asym_field(&field, &v2, mu).unwrap();
            let tr = a[(0, 0)] + a[(1, 1)];
            let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
            let disc = tr * tr - 4.0 * det;
            match mp.region {
                Region::Complex => {
                    assert!(disc < 0.0);
                    complex_seen += 1;
                }
                Region::Boundary => {}
                _ => {
                    assert!(disc >= 0.0);
                    real_seen += 1;
                }
            }
        }
        assert!(real_seen > 0);
        assert!(complex_seen > 0, "test field never hit the complex domain");
    }

    #[test]
    fn classify_antipodal_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let field = random_field(&mut rng);
        for _ in 0..300 {
            let v2 = random_unit(&mut rng);
            let mu = rng.gen_range(0.05..0.95);
            let a = classify(&field, &v2, mu).unwrap();
            let b = classify(&field, &(-v2), mu).unwrap();
            let same = match (a.region, b.region) {
                (Region::Complex, Region::Complex) => true,
                (Region::Boundary, Region::Boundary) => true,
                (Region::RealTwoPositive, Region::RealTwoPositive) => true,
                (Region::RealTwoNegative, Region::RealTwoNegative) => true,
                (Region::RealMixed, Region::RealMixed) => true,
                _ => false,
            };
            assert!(same, "antipodal classification mismatch");
        }
    }

    #[test]
    fn roundtrip_classify_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let field = random_field(&mut rng);
        let mut tested = 0;
        for _ in 0..400 {
            let x = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let t = field.eval(&x);
            let mu_signed = match tensor::mode(&t) {
                Ok(m) => m,
                Err(_) => continue,
            };
            let mu = mu_signed.abs();
            if !(1e-3..=0.999).contains(&mu) {
                continue;
            }
            tested += 1;
            let frame = eigen_decompose(&t);
            let v2 = disambiguate_v2(&field, &frame, mu_signed).unwrap();
            let mp = classify(&field, &v2, mu).unwrap();
            assert!(
                !matches!(mp.region, Region::Complex),
                "realized v2 classified complex"
            );
            let sign = if mu_signed > 0.0 { 1 } else { -1 };
            let (pos, tens) = map_to_space(&field, &mp, sign).unwrap();
            assert!(
                (pos - x).norm() < 1e-7,
                "roundtrip position error {}",
                (pos - x).norm()
            );
            assert!(tens.sub(&t).norm() < 1e-6 * t.norm().max(1.0));
            // Dominant eigenvector of the recovered tensor aligns with the
            // selected eigenvector of A.
            let rec = eigen_decompose(&tens);
            let dom = if sign > 0 { rec.v[0] } else { rec.v[2] };
            let e = if mp
                .a_major
                .map(|e| e.dot(&dom).abs())
                .unwrap_or(0.0)
                > mp.a_minor.map(|e| e.dot(&dom).abs()).unwrap_or(0.0)
            {
                mp.a_major.unwrap()
            } else {
                mp.a_minor.unwrap()
            };
            assert!(
                e.dot(&dom).abs() > (1e-7f64).cos(),
                "dominant eigenvector mismatch"
            );
        }
        assert!(tested > 50, "too few usable samples: {tested}");
    }

    #[test]
    fn domain_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let field = random_field(&mut rng);
        for _ in 0..500 {
            let v2 = random_unit(&mut rng);
            let mu1 = rng.gen_range(0.05..0.5);
            let mu2 = rng.gen_range(mu1 + 0.01..0.99);
            let d1 = boundary_residual(&field, &v2, mu1).unwrap();
            let d2 = boundary_residual(&field, &v2, mu2).unwrap();
            if d1 < -BOUNDARY_TOL {
                assert!(d2 < -BOUNDARY_TOL / 2.0, "complex at μ1 must stay complex at μ2");
            }
        }
    }

    #[test]
    fn eightfold_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let field = random_field(&mut rng);
        let f = field.char_eigenframe();
        for _ in 0..100 {
            let v2 = random_unit(&mut rng);
            let mu = rng.gen_range(0.05..0.95);
            let base = boundary_residual(&field, &v2, mu).unwrap();
            let coords = Vector3::new(
                f.v[0].dot(&v2),
                f.v[1].dot(&v2),
                f.v[2].dot(&v2),
            );
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        let w = f.v[0] * (sx * coords.x)
                            + f.v[1] * (sy * coords.y)
                            + f.v[2] * (sz * coords.z);
                        let r = boundary_residual(&field, &w, mu).unwrap();
                        assert!((r - base).abs() < 1e-12, "eight-fold symmetry broken");
                    }
                }
            }
        }
    }

    #[test]
    fn arcs_loop_counts_and_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..6 {
            let field = random_field(&mut rng);
            let mu0 = field.bifurcation_mode();
            for (mu, want_loops) in [
                (0.5 * mu0, 4usize),
                (0.9 * mu0, 4),
                (mu0 + 0.5 * (1.0 - mu0), 2),
                (mu0 + 0.9 * (1.0 - mu0), 2),
            ] {
                if !(1e-6..=1.0 - 1e-9).contains(&mu) {
                    continue;
                }
                let set = boundary_arcs(&field, mu).unwrap();
                assert_eq!(set.arcs.len(), 8);
                assert_eq!(set.loops.len(), want_loops, "mu={mu} mu0={mu0}");
                for arc in &set.arcs {
                    for s in &arc.samples {
                        let r = boundary_residual(&field, &s.v2, mu).unwrap();
                        assert!(r.abs() < 1e-10, "arc sample off the boundary: {r:.3e}");
                    }
                    // Sampling density
                    for w in arc.samples.windows(2) {
                        let ang = w[0].v2.dot(&w[1].v2).clamp(-1.0, 1.0).acos();
                        assert!(ang <= ARC_SAMPLE_STEP + 1e-9);
                    }
                }
                // Loops connect: consecutive arcs share endpoints.
                for lp in &set.loops {
                    for k in 0..lp.len() {
                        let (i, fwd_i) = lp[k];
                        let (j, fwd_j) = lp[(k + 1) % lp.len()];
                        let end_i = if fwd_i {
                            set.arcs[i].samples.last().unwrap().v2
                        } else {
                            set.arcs[i].samples[0].v2
                        };
                        let start_j = if fwd_j {
                            set.arcs[j].samples[0].v2
                        } else {
                            set.arcs[j].samples.last().unwrap().v2
                        };
                        assert!(
                            (end_i - start_j).norm() < 1e-7,
                            "loop arcs disconnected: {}",
                            (end_i - start_j).norm()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn arcs_at_bifurcation_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let field = random_field(&mut rng);
        let mu0 = field.bifurcation_mode();
        if mu0 < 1.0 - 1e-9 {
            assert!(matches!(
                boundary_arcs(&field, mu0),
                Err(Error::AtBifurcation(_))
            ));
        }
    }

    #[test]
    fn neutral_singularities_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // Degenerate characteristic rejected.
        let target = SymTensor3::from_diagonal([2.0, -1.0, -1.0]).scale(1.0 / 6.0f64.sqrt());
        let f = field_with_characteristic(&mut rng, &target.scale(-1.0));
        // target has λ2=λ3 ⇒ either orientation gives repeated eigenvalues.
        assert!(matches!(
            neutral_singularities(&f),
            Err(Error::DegenerateCharacteristic)
        ));

        // Formula check for λ̄ = (1,0,−1)/√2.
        let target = SymTensor3::from_diagonal([1.0, 0.0, -1.0]).scale(1.0 / 2.0f64.sqrt());
        let f = field_with_characteristic(&mut rng, &target);
        let sings = neutral_singularities(&f).unwrap();
        let frame = f.char_eigenframe();
        for s in &sings {
            let a = s.direction_on_manifold.dot(&frame.v[0]).abs();
            let c = s.direction_on_manifold.dot(&frame.v[2]).abs();
            assert_relative_eq!(a, (0.5f64).sqrt(), epsilon = 1e-9);
            assert_relative_eq!(c, (0.5f64).sqrt(), epsilon = 1e-9);
        }
    }

    #[test]
    fn singular_lines_have_zero_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            let field = random_field(&mut rng);
            let sings = match neutral_singularities(&field) {
                Ok(s) => s,
                Err(_) => continue,
            };
            for s in &sings {
                for k in -5..=5 {
                    let p = s.point + s.line_direction * (k as f64 * 0.7);
                    let m = field.mode_at(&p).unwrap();
                    assert!(m.abs() < 1e-9, "mode along singular line: {m:.3e}");
                    // The singular direction is the medium eigenvector there.
                    let fr = eigen_decompose(&field.eval(&p));
                    assert!(
                        fr.v[1].dot(&s.direction_on_manifold).abs() > 1.0 - 1e-7,
                        "medium eigenvector drifts from the singular direction"
                    );
                }
            }
        }
    }

    #[test]
    fn quad_param_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let field = random_field(&mut rng);
        if neutral_singularities(&field).is_err() {
            return;
        }
        let sings = neutral_singularities(&field).unwrap();
        // Irregular chart corners coincide with the singularities.
        let corners = [
            quad_param(&field, 0.0, 0.0),
            quad_param(&field, std::f64::consts::PI, 0.0),
            quad_param(&field, 0.0, std::f64::consts::PI - 1e-14),
            quad_param(&field, std::f64::consts::PI, std::f64::consts::PI - 1e-14),
        ];
        for c in &corners {
            let hit = sings.iter().any(|s| {
                c.dot(&s.direction_on_manifold).abs() > 1.0 - 1e-8
            });
            assert!(hit, "chart corner is not a singular direction");
        }
        // f value for λ̄=(1,0,−1)/√2 is 0: chart reduces to spherical coords.
        let target = SymTensor3::from_diagonal([1.0, 0.0, -1.0]).scale(1.0 / 2.0f64.sqrt());
        let f2 = field_with_characteristic(&mut rng, &target);
        let l = f2.char_eigenframe().lambda;
        let fval = (2.0 * l[1] - l[2] - l[0]) / (l[2] - l[1]);
        assert_relative_eq!(fval, 0.0, epsilon = 1e-9);
        // Coverage: random directions are approached by some grid point.
        for _ in 0..50 {
            let tgt = tests_random_unit(&mut rng);
            let mut best = f64::INFINITY;
            for i in 0..64 {
                for j in 1..32 {
                    let th = 2.0 * std::f64::consts::PI * i as f64 / 64.0;
                    let eta = std::f64::consts::PI * j as f64 / 32.0;
                    let g = quad_param(&field, th, eta);
                    best = best.min((g - tgt).norm().min((g + tgt).norm()));
                }
            }
            assert!(best < 0.2, "coverage hole near {tgt:?}: {best}");
        }
    }

    fn tests_random_unit(rng: &mut impl Rng) -> Vector3<f64> {
        random_unit(rng)
    }

    #[test]
    fn mode_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let field = random_field(&mut rng);
        let h = 1e-5;
        for _ in 0..100 {
            let p = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if field.eval(&p).norm() < 0.3 {
                continue;
            }
            let g = field.mode_gradient(&p);
            let hmat = field.mode_hessian(&p);
            let mode_unclamped = |q: &Vector3<f64>| {
                let t = field.eval(q);
                3.0 * 6.0f64.sqrt() * t.det() / t.norm().powi(3)
            };
            for i in 0..3 {
                let mut dp = Vector3::zeros();
                dp[i] = h;
                let fd = (mode_unclamped(&(p + dp)) - mode_unclamped(&(p - dp))) / (2.0 * h);
                assert_relative_eq!(g[i], fd, epsilon = 1e-6, max_relative = 1e-5);
                for j in 0..3 {
                    let mut dq = Vector3::zeros();
                    dq[j] = h;
                    let fd2 = (mode_unclamped(&(p + dp + dq))
                        - mode_unclamped(&(p + dp - dq))
                        - mode_unclamped(&(p - dp + dq))
                        + mode_unclamped(&(p - dp - dq)))
                        / (4.0 * h * h);
                    assert_relative_eq!(hmat[(i, j)], fd2, epsilon = 2e-4, max_relative = 1e-3);
                }
            }
        }
    }
#[test]
fn residual_at_offenders() {
    use crate::field::*;
    use crate::synth;
    use nalgebra::Vector3;
    let field_g = synth::random_linear_field(17);
    let ds = synth::single_linear_box(&field_g, Vector3::new(-1.0,-1.0,-1.0), Vector3::new(1.0,1.0,1.0), 2).unwrap();
    let mesh = ds.to_tet_mesh().unwrap();
    let data = std::fs::read_to_string("/tmp/check_v2.txt").unwrap();
    for line in data.lines() {
        let c: Vec<f64> = line.split_whitespace().map(|x| x.parse().unwrap()).collect();
        let v2 = Vector3::new(c[0], c[1], c[2]).normalize();
        let mut min_abs = f64::INFINITY;
        let mut val = 0.0;
        for ti in 0..mesh.tets.len() {
            let f = LinearTensorField::from_tet(&mesh.tet_positions(ti), &mesh.tet_tensors(ti)).unwrap();
            let r = boundary_residual(&f, &v2, 0.6).unwrap();
            if r.abs() < min_abs { min_abs = r.abs(); val = r; }
        }
        println!("v2 {:?}: min |Delta| over tets = {:.3e} (value {:.3e})", v2, min_abs, val);
    }
}

}
