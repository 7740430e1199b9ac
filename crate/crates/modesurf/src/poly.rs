//! Dense univariate polynomials with real coefficients and the root-finding
//! machinery shared by the edge-intersection and critical-point solvers.

use num_complex::Complex64;

/// Coefficients in ascending order: c[0] + c[1] x + ... + c[n] x^n.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn zero() -> Self {
        Poly(vec![0.0])
    }

    pub fn constant(c: f64) -> Self {
        Poly(vec![c])
    }

    pub fn degree(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn eval_complex(&self, z: Complex64) -> Complex64 {
        self.0
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    pub fn derivative(&self) -> Poly {
        if self.0.len() <= 1 {
            return Poly::zero();
        }
        Poly(
            self.0[1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| c * (i + 1) as f64)
                .collect(),
        )
    }

    pub fn add(&self, o: &Poly) -> Poly {
        let n = self.0.len().max(o.0.len());
        let mut c = vec![0.0; n];
        for (i, &a) in self.0.iter().enumerate() {
            c[i] += a;
        }
        for (i, &b) in o.0.iter().enumerate() {
            c[i] += b;
        }
        Poly(c)
    }

    pub fn sub(&self, o: &Poly) -> Poly {
        self.add(&o.scale(-1.0))
    }

    pub fn scale(&self, k: f64) -> Poly {
        Poly(self.0.iter().map(|&c| c * k).collect())
    }

    pub fn mul(&self, o: &Poly) -> Poly {
        let mut c = vec![0.0; self.0.len() + o.0.len() - 1];
        for (i, &a) in self.0.iter().enumerate() {
            for (j, &b) in o.0.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Poly(c)
    }

    /// Largest |coefficient|, used as the residual scale.
    pub fn coeff_scale(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, &c| m.max(c.abs()))
    }

    /// Drop trailing coefficients below `rel` times the largest one.
    pub fn trimmed(&self, rel: f64) -> Poly {
        let s = self.coeff_scale();
        let mut v = self.0.clone();
        while v.len() > 1 && v.last().unwrap().abs() <= rel * s {
            v.pop();
        }
        Poly(v)
    }
}

/// All complex roots by the Aberth–Ehrlich simultaneous iteration.
/// Deterministic: fixed initial configuration, fixed iteration cap.
pub fn roots(p: &Poly) -> Vec<Complex64> {
    let p = p.trimmed(1e-300);
    let n = p.degree();
    if n == 0 {
        return vec![];
    }
    let lead = *p.0.last().unwrap();
    let monic: Vec<f64> = p.0.iter().map(|&c| c / lead).collect();
    // Cauchy bound on root magnitude.
    let r = 1.0
        + monic[..n]
            .iter()
            .fold(0.0f64, |m, &c| m.max(c.abs()));
    let dp = p.derivative();
    let mut z: Vec<Complex64> = (0..n)
        .map(|k| {
            let ang = 2.0 * std::f64::consts::PI * (k as f64 + 0.3751) / n as f64;
            Complex64::from_polar(0.5 * r.min(1e8), ang)
        })
        .collect();
    for _ in 0..120 {
        let mut done = true;
        let zs = z.clone();
        for i in 0..n {
            let pv = p.eval_complex(zs[i]);
            let dv = dp.eval_complex(zs[i]);
            if pv.norm() == 0.0 {
                continue;
            }
            let newton = if dv.norm() > 0.0 { pv / dv } else { pv };
            let mut sum = Complex64::new(0.0, 0.0);
            for (j, &zj) in zs.iter().enumerate() {
                if j != i {
                    let d = zs[i] - zj;
                    if d.norm() > 1e-300 {
                        sum += 1.0 / d;
                    }
                }
            }
            let denom = Complex64::new(1.0, 0.0) - newton * sum;
            let step = if denom.norm() > 1e-300 {
                newton / denom
            } else {
                newton
            };
            z[i] -= step;
            if step.norm() > 1e-14 * (1.0 + z[i].norm()) {
                done = false;
            }
        }
        if done {
            break;
        }
    }
    z
}

/// Real roots of `p` inside [lo, hi], polished by bracketed bisection/secant
/// to the residual tolerance `res_tol` (absolute, in polynomial value).
pub fn real_roots_in(p: &Poly, lo: f64, hi: f64, res_tol: f64) -> Vec<f64> {
    let span = hi - lo;
    let imag_tol = 1e-7 * (1.0 + span);
    let mut out: Vec<f64> = Vec::new();
    for z in roots(p) {
        if z.im.abs() > imag_tol * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re.clamp(lo - 0.01 * span, hi + 0.01 * span);
        x = polish_root(p, x, lo, hi, res_tol);
        if x >= lo - 1e-12 * (1.0 + span) && x <= hi + 1e-12 * (1.0 + span) {
            let x = x.clamp(lo, hi);
            if !out.iter().any(|&y| (y - x).abs() < 1e-9 * (1.0 + span)) {
                out.push(x);
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Newton polish with a bracketing fallback around x0.
fn polish_root(p: &Poly, x0: f64, lo: f64, hi: f64, res_tol: f64) -> f64 {
    let dp = p.derivative();
    let mut x = x0;
    for _ in 0..40 {
        let f = p.eval(x);
        if f.abs() <= res_tol {
            return x;
        }
        let d = dp.eval(x);
        if d.abs() < 1e-300 {
            break;
        }
        let step = f / d;
        let xn = x - step;
        if !xn.is_finite() {
            break;
        }
        if (xn - x).abs() < 1e-16 * (1.0 + x.abs()) {
            return xn;
        }
        x = xn;
    }
    // Bracketing fallback: scan a small window for a sign change.
    let h = 1e-6 * (hi - lo).max(1.0);
    let (mut a, mut b) = (x - h, x + h);
    let (mut fa, mut fb) = (p.eval(a), p.eval(b));
    let mut grow = h;
    for _ in 0..30 {
        if fa * fb <= 0.0 {
            break;
        }
        grow *= 2.0;
        a = x - grow;
        b = x + grow;
        fa = p.eval(a);
        fb = p.eval(b);
        if a < lo - (hi - lo) && b > hi + (hi - lo) {
            break;
        }
    }
    if fa * fb <= 0.0 {
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            let fm = p.eval(m);
            if fm.abs() <= res_tol || (b - a) < 1e-17 * (1.0 + m.abs()) {
                return m;
            }
            if fa * fm <= 0.0 {
                b = m;
            } else {
                a = m;
                fa = fm;
            }
        }
        return 0.5 * (a + b);
    }
    x
}

/// Real roots of a cubic c0 + c1 x + c2 x^2 + c3 x^3 via the trigonometric /
/// Cardano closed form. Falls back to the quadratic/linear cases.
pub fn cubic_real_roots(c0: f64, c1: f64, c2: f64, c3: f64) -> Vec<f64> {
    let scale = c0.abs().max(c1.abs()).max(c2.abs()).max(c3.abs());
    if scale == 0.0 {
        return vec![];
    }
    if c3.abs() < 1e-14 * scale {
        // quadratic
        if c2.abs() < 1e-14 * scale {
            if c1.abs() < 1e-14 * scale {
                return vec![];
            }
            return vec![-c0 / c1];
        }
        let disc = c1 * c1 - 4.0 * c2 * c0;
        if disc < 0.0 {
            return vec![];
        }
        let sq = disc.sqrt();
        let q = -0.5 * (c1 + c1.signum() * sq);
        let mut r = if q.abs() > 0.0 {
            vec![q / c2, c0 / q]
        } else {
            vec![0.0, 0.0]
        };
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        return r;
    }
    let a = c2 / c3;
    let b = c1 / c3;
    let c = c0 / c3;
    // depressed: t^3 + p t + q, x = t - a/3
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let shift = -a / 3.0;
    let disc = -(4.0 * p * p * p + 27.0 * q * q);
    let mut out = if disc > 0.0 {
        // three real roots
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (phi - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift)
            .collect::<Vec<_>>()
    } else {
        // one real root (Cardano)
        let d = (q * q / 4.0 + p * p * p / 27.0).max(0.0).sqrt();
        let u = (-q / 2.0 + d).cbrt();
        let v = (-q / 2.0 - d).cbrt();
        vec![u + v + shift]
    };
    // one Newton step per root against the original cubic
    for x in out.iter_mut() {
        for _ in 0..3 {
            let f = ((c3 * *x + c2) * *x + c1) * *x + c0;
            let df = (3.0 * c3 * *x + 2.0 * c2) * *x + c1;
            if df.abs() > 1e-300 {
                *x -= f / df;
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * (1.0 + a.abs()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_and_arith() {
        let p = Poly(vec![1.0, -2.0, 3.0]); // 1 - 2x + 3x^2
        assert_eq!(p.eval(2.0), 9.0);
        let q = p.mul(&Poly(vec![0.0, 1.0])); // x * p
        assert_eq!(q.eval(2.0), 18.0);
        assert_eq!(p.derivative().eval(2.0), 10.0);
    }

    #[test]
    fn roots_of_known_polynomial() {
        // (x-1)(x-2)(x-3)(x+4) = x^4 - 2x^3 - 13x^2 + 38x - 24
        let p = Poly(vec![-24.0, 38.0, -13.0, -2.0, 1.0]);
        let r = real_roots_in(&p, -10.0, 10.0, 1e-12);
        assert_eq!(r.len(), 4);
        for (got, want) in r.iter().zip([-4.0, 1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn roots_complex_pairs_excluded() {
        // (x^2+1)(x-0.5)
        let p = Poly(vec![-0.5, 1.0, -0.5, 1.0]);
        let r = real_roots_in(&p, -2.0, 2.0, 1e-13);
        assert_eq!(r.len(), 1);
        assert!((r[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn high_degree_clustered() {
        // (x-0.3)^2 (x-0.7) (x^2 + 0.09) scaled
        let a = Poly(vec![0.09, -0.6, 1.0]); // (x-0.3)^2
        let b = Poly(vec![-0.7, 1.0]);
        let c = Poly(vec![0.09, 0.0, 1.0]);
        let p = a.mul(&b).mul(&c).scale(7.0);
        let r = real_roots_in(&p, 0.0, 1.0, 1e-10);
        assert!(r.iter().any(|&x| (x - 0.7).abs() < 1e-8));
        assert!(r.iter().any(|&x| (x - 0.3).abs() < 1e-4), "{r:?}");
    }

    #[test]
    fn cubic_cases() {
        let r = cubic_real_roots(-6.0, 11.0, -6.0, 1.0); // (x-1)(x-2)(x-3)
        assert_eq!(r.len(), 3);
        for (got, want) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let r = cubic_real_roots(1.0, 1.0, 0.0, 1.0); // one real root
        assert_eq!(r.len(), 1);
        let x = r[0];
        assert!((x * x * x + x + 1.0).abs() < 1e-12);
        // degenerate quadratic path
        let r = cubic_real_roots(2.0, -3.0, 1.0, 0.0);
        assert_eq!(r, vec![1.0, 2.0]);
    }
}
