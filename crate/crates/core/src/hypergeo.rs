//! Hyperbolic geometry on the Poincaré ball and Klein model.
//!
//! Every function here is pure and allocation-light. The typed wrappers
//! ([`BallPoint`], [`KleinPoint`], [`TangentGrad`]) check invariants at the
//! boundary; the slice kernels in this module are what the classifier's hot
//! loop calls directly.
//!
//! Points are kept at Euclidean norm `<= 1 - BALL_EPS`. That bound keeps the
//! conformal factor below `1e5` and makes `atanh` and the Klein-to-Poincaré
//! square root well conditioned.

use crate::error::{Error, Result};

/// Clamp margin for ball membership.
pub const BALL_EPS: f64 = 1e-5;

/// Largest admissible Euclidean norm of a point in the unit ball.
pub const MAX_NORM: f64 = 1.0 - BALL_EPS;

/// Curvature magnitude `c > 0` of the Möbius layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Curvature(c))
        } else {
            Err(Error::InvalidConfig(format!("curvature must be positive, got {c}")))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// Radius that Möbius-layer points are clamped to.
    ///
    /// This is the unit-ball clamp radius, shrunk to `MAX_NORM / sqrt(c)`
    /// when `c > 1` so that `sqrt(c) * |x| < 1` always holds.
    #[inline]
    pub fn max_norm(self) -> f64 {
        MAX_NORM / self.0.sqrt().max(1.0)
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(1.0)
    }
}

/// A point strictly inside the unit ball (Poincaré model).
#[derive(Clone, Debug, PartialEq)]
pub struct BallPoint(Vec<f64>);

/// A point of the Klein model. Only produced transiently during pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct KleinPoint(Vec<f64>);

/// A gradient vector attached to some base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentGrad(pub Vec<f64>);

impl BallPoint {
    /// Checks `d >= 1`, finiteness and `|x| <= 1 - BALL_EPS`.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_point(&coords, MAX_NORM)?;
        Ok(BallPoint(coords))
    }

    pub fn origin(d: usize) -> Self {
        BallPoint(vec![0.0; d])
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn neg(&self) -> Self {
        BallPoint(self.0.iter().map(|v| -v).collect())
    }
}

impl KleinPoint {
    /// Klein points only need to lie strictly inside the unit ball.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        check_point(&coords, f64::from_bits(1.0f64.to_bits() - 1))?;
        Ok(KleinPoint(coords))
    }

    #[inline]
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_point(coords: &[f64], max: f64) -> Result<()> {
    if coords.is_empty() {
        return Err(Error::EmptyInput("point with zero dimensions"));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("non-finite coordinate".into()));
    }
    let n = norm(coords);
    if n > max {
        return Err(Error::InvalidConfig(format!("point norm {n} outside ball radius {max}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Slice kernels
// ---------------------------------------------------------------------------

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    sq_norm(a).sqrt()
}

/// Rescales `v` in place onto the sphere of radius `max` if it lies outside.
/// Returns the original norm when the projection was active.
pub fn project_in_place(v: &mut [f64], max: f64) -> Option<f64> {
    let n = norm(v);
    if n <= max {
        return None;
    }
    let mut scale = max / n;
    loop {
        let projected = v.iter().map(|x| x * scale).map(|x| x * x).sum::<f64>().sqrt();
        if projected <= max {
            break;
        }
        // rounding pushed us one ulp outside
        scale *= 1.0 - f64::EPSILON;
    }
    v.iter_mut().for_each(|x| *x *= scale);
    Some(n)
}

/// `2 / (1 - c|x|^2)`.
#[inline]
pub fn conformal_factor_c(x: &[f64], c: f64) -> f64 {
    2.0 / (1.0 - c * sq_norm(x))
}

/// Scales a Euclidean gradient by the inverse metric `1 / lambda_x^2` in place.
#[inline]
pub fn riemannian_scale_in_place(x: &[f64], grad: &mut [f64], c: f64) {
    let s = (1.0 - c * sq_norm(x)) / 2.0;
    let s = s * s;
    grad.iter_mut().for_each(|g| *g *= s);
}

/// `x <- project(x - lr * grad)` with the given clamp radius.
#[inline]
pub fn retract_in_place(x: &mut [f64], grad: &[f64], lr: f64, max: f64) {
    x.iter_mut().zip(grad).for_each(|(xi, gi)| *xi -= lr * gi);
    project_in_place(x, max);
}

/// Writes `2p / (1 + |p|^2)` into `out`.
#[inline]
pub fn poincare_to_klein_into(p: &[f64], out: &mut [f64]) {
    let s = 2.0 / (1.0 + sq_norm(p));
    out.iter_mut().zip(p).for_each(|(o, v)| *o = s * v);
}

/// Writes `k / (1 + sqrt(1 - |k|^2))` into `out`.
#[inline]
pub fn klein_to_poincare_into(k: &[f64], out: &mut [f64]) {
    let s = 1.0 / (1.0 + (1.0 - sq_norm(k)).max(0.0).sqrt());
    out.iter_mut().zip(k).for_each(|(o, v)| *o = s * v);
}

/// Lorentz factor of the Klein image of a Poincaré point, evaluated without
/// forming the Klein point: `1 - |k|^2 = ((1 - |p|^2) / (1 + |p|^2))^2`.
#[inline]
pub fn lorentz_factor_of_poincare(p: &[f64]) -> f64 {
    let n = sq_norm(p);
    (1.0 + n) / (1.0 - n)
}

/// Möbius addition `x (+)_c b`, unprojected, into `out`.
pub fn mobius_add_into(x: &[f64], b: &[f64], c: f64, out: &mut [f64]) {
    let xb = dot(x, b);
    let xx = sq_norm(x);
    let bb = sq_norm(b);
    let a = 1.0 + 2.0 * c * xb + c * bb;
    let bcoef = 1.0 - c * xx;
    let den = 1.0 + 2.0 * c * xb + c * c * xx * bb;
    for ((o, xi), bi) in out.iter_mut().zip(x).zip(b) {
        *o = (a * xi + bcoef * bi) / den;
    }
}

/// `y = M x` for row-major `M` with `y.len()` rows.
#[inline]
pub fn matvec_into(m: &[f64], x: &[f64], y: &mut [f64]) {
    let d = x.len();
    for (yi, row) in y.iter_mut().zip(m.chunks_exact(d)) {
        *yi = dot(row, x);
    }
}

/// Möbius matrix-vector product, unprojected, into `out`.
///
/// Evaluated as `(h(|x|^2) / sqrt c) * tanh_ratio(|Mx|^2 h^2) * Mx`, which is
/// the closed form rewritten so both zero cases are removable singularities.
pub fn mobius_matvec_into(m: &[f64], x: &[f64], c: f64, out: &mut [f64]) {
    matvec_into(m, x, out);
    let q = sq_norm(x);
    let s2 = sq_norm(out);
    if q == 0.0 || s2 == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (h, _) = atanh_ratio(q, c);
    let (phi, _) = tanh_ratio(s2 * h * h);
    let scale = h / c.sqrt() * phi;
    out.iter_mut().for_each(|v| *v *= scale);
}

// ---------------------------------------------------------------------------
// Smooth scalar helpers (value, derivative)
// ---------------------------------------------------------------------------

const TANH_SERIES: [f64; 6] = [
    1.0,
    -1.0 / 3.0,
    2.0 / 15.0,
    -17.0 / 315.0,
    62.0 / 2835.0,
    -1382.0 / 155_925.0,
];

/// `tanh(t) / t` as a function of `T = t^2`, with its derivative in `T`.
pub fn tanh_ratio(t2: f64) -> (f64, f64) {
    if t2 < 2.5e-3 {
        let mut val = 0.0;
        let mut der = 0.0;
        let mut pow = 1.0;
        for (j, a) in TANH_SERIES.iter().enumerate() {
            val += a * pow;
            if j + 1 < TANH_SERIES.len() {
                der += TANH_SERIES[j + 1] * (j + 1) as f64 * pow;
            }
            pow *= t2;
        }
        (val, der)
    } else {
        let t = t2.sqrt();
        let th = t.tanh();
        let val = th / t;
        let der = ((1.0 - th * th) * t - th) / (2.0 * t2 * t);
        (val, der)
    }
}

/// `atanh(sqrt(c) r) / r` as a function of `q = r^2`, with its derivative in
/// `q`. The `atanh` argument is clamped to `MAX_NORM`; past the clamp the
/// derivative is that of the clamped expression.
pub fn atanh_ratio(q: f64, c: f64) -> (f64, f64) {
    let z2 = c * q;
    let sc = c.sqrt();
    if z2 > MAX_NORM * MAX_NORM {
        let r = q.sqrt();
        let h = MAX_NORM.atanh() / r;
        return (h, -h / (2.0 * q));
    }
    if z2 < 2.5e-3 {
        // sum_j Z^j / (2j + 1)
        let mut val = 0.0;
        let mut der = 0.0;
        let mut pow = 1.0;
        for j in 0..7 {
            val += pow / (2 * j + 1) as f64;
            der += (j + 1) as f64 * pow / (2 * j + 3) as f64;
            pow *= z2;
        }
        (sc * val, c * sc * der)
    } else {
        let z = z2.sqrt();
        let a = z.atanh() / z;
        let da = 1.0 / (2.0 * z2 * (1.0 - z2)) - a / (2.0 * z2);
        (sc * a, c * sc * da)
    }
}

// ---------------------------------------------------------------------------
// Typed operations
// ---------------------------------------------------------------------------

/// `lambda_x = 2 / (1 - |x|^2)`.
pub fn conformal_factor(x: &BallPoint) -> f64 {
    conformal_factor_c(x.coords(), 1.0)
}

/// Converts a Euclidean gradient at `x` to the Riemannian gradient
/// `g / lambda_x^2`.
pub fn riemannian_grad(x: &BallPoint, g_euclid: &TangentGrad) -> Result<TangentGrad> {
    check_dims(x.dim(), g_euclid.0.len())?;
    let mut g = g_euclid.0.clone();
    riemannian_scale_in_place(x.coords(), &mut g, 1.0);
    Ok(TangentGrad(g))
}

/// Clamps `v` into the ball of radius `1 - BALL_EPS`.
pub fn project_to_ball(v: &[f64]) -> BallPoint {
    let mut out = v.to_vec();
    project_in_place(&mut out, MAX_NORM);
    BallPoint(out)
}

pub fn poincare_to_klein(p: &BallPoint) -> KleinPoint {
    let mut out = vec![0.0; p.dim()];
    poincare_to_klein_into(p.coords(), &mut out);
    KleinPoint(out)
}

pub fn klein_to_poincare(k: &KleinPoint) -> BallPoint {
    let mut out = vec![0.0; k.dim()];
    klein_to_poincare_into(k.coords(), &mut out);
    project_in_place(&mut out, MAX_NORM);
    BallPoint(out)
}

/// `gamma = 1 / sqrt(1 - |k|^2)`.
pub fn lorentz_factor(k: &KleinPoint) -> f64 {
    1.0 / (1.0 - sq_norm(k.coords())).sqrt()
}

/// Lorentz-weighted average of Klein points, clamped into the ball.
pub fn einstein_midpoint(points: &[KleinPoint]) -> Result<KleinPoint> {
    let first = points.first().ok_or(Error::EmptyInput("einstein_midpoint of no points"))?;
    let d = first.dim();
    let mut acc = vec![0.0; d];
    let mut total = 0.0;
    for p in points {
        check_dims(d, p.dim())?;
        let g = lorentz_factor(p);
        total += g;
        acc.iter_mut().zip(p.coords()).for_each(|(a, v)| *a += g * v);
    }
    acc.iter_mut().for_each(|a| *a /= total);
    project_in_place(&mut acc, MAX_NORM);
    Ok(KleinPoint(acc))
}

/// Möbius addition `x (+)_c b`.
pub fn mobius_add(x: &BallPoint, b: &BallPoint, c: Curvature) -> Result<BallPoint> {
    check_dims(x.dim(), b.dim())?;
    let mut out = vec![0.0; x.dim()];
    mobius_add_into(x.coords(), b.coords(), c.value(), &mut out);
    project_in_place(&mut out, c.max_norm());
    Ok(BallPoint(out))
}

/// Möbius matrix-vector product `M (x)_c x` for a row-major `rows x d` matrix.
pub fn mobius_matvec(m: &[f64], rows: usize, x: &BallPoint, c: Curvature) -> Result<BallPoint> {
    check_dims(rows * x.dim(), m.len())?;
    if rows == 0 {
        return Err(Error::EmptyInput("matrix with zero rows"));
    }
    let mut out = vec![0.0; rows];
    mobius_matvec_into(m, x.coords(), c.value(), &mut out);
    project_in_place(&mut out, c.max_norm());
    Ok(BallPoint(out))
}

/// First-order retraction `project(x - lr * g)`.
pub fn retract(x: &BallPoint, riem_grad: &TangentGrad, lr: f64) -> Result<BallPoint> {
    check_dims(x.dim(), riem_grad.0.len())?;
    let mut out = x.0.clone();
    retract_in_place(&mut out, &riem_grad.0, lr, MAX_NORM);
    Ok(BallPoint(out))
}

fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bp(v: &[f64]) -> BallPoint {
        BallPoint::new(v.to_vec()).unwrap()
    }

    fn kp(v: &[f64]) -> KleinPoint {
        KleinPoint::new(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn conformal_factor_values() {
        assert_eq!(conformal_factor(&BallPoint::origin(3)), 2.0);
        let x = bp(&[0.5, 0.0]);
        assert!((conformal_factor(&x) - 8.0 / 3.0).abs() < 1e-15);
        let edge = bp(&[MAX_NORM]);
        let lam = conformal_factor(&edge);
        assert!((lam - 2.0 / (2.0 * BALL_EPS)).abs() / lam < 1e-4);
        assert!(lam > conformal_factor(&bp(&[0.99])));
    }

    #[test]
    fn riemannian_grad_values() {
        let g = riemannian_grad(&BallPoint::origin(2), &TangentGrad(vec![4.0, 0.0])).unwrap();
        assert_eq!(g.0, vec![1.0, 0.0]);
        let g = riemannian_grad(&bp(&[0.5, 0.0]), &TangentGrad(vec![1.0, 0.0])).unwrap();
        assert!((g.0[0] - 9.0 / 64.0).abs() < 1e-15);
        let g = riemannian_grad(&bp(&[0.3, 0.1]), &TangentGrad(vec![0.0, 0.0])).unwrap();
        assert_eq!(g.0, vec![0.0, 0.0]);
        assert!(riemannian_grad(&bp(&[0.3]), &TangentGrad(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn project_values() {
        assert_eq!(project_to_ball(&[0.1, 0.1]).coords(), &[0.1, 0.1]);
        assert_eq!(project_to_ball(&[2.0, 0.0]).coords(), &[1.0 - 1e-5, 0.0]);
        assert_eq!(project_to_ball(&[0.0, 0.0]).coords(), &[0.0, 0.0]);
    }

    #[test]
    fn klein_maps() {
        assert_eq!(poincare_to_klein(&BallPoint::origin(2)).coords(), &[0.0, 0.0]);
        assert!(close(poincare_to_klein(&bp(&[0.5, 0.0])).coords(), &[0.8, 0.0], 1e-15));
        assert_eq!(klein_to_poincare(&kp(&[0.0, 0.0])).coords(), &[0.0, 0.0]);
        assert!(close(klein_to_poincare(&kp(&[0.8, 0.0])).coords(), &[0.5, 0.0], 1e-15));
    }

    #[test]
    fn lorentz_values() {
        assert_eq!(lorentz_factor(&kp(&[0.0, 0.0])), 1.0);
        assert!((lorentz_factor(&kp(&[0.8, 0.0])) - 5.0 / 3.0).abs() < 1e-14);
        assert!(lorentz_factor(&kp(&[0.81])) > lorentz_factor(&kp(&[0.8])));
        let p = [0.3, -0.6];
        let k = poincare_to_klein(&bp(&p));
        assert!((lorentz_factor(&k) - lorentz_factor_of_poincare(&p)).abs() < 1e-13);
    }

    #[test]
    fn midpoint_values() {
        let x = kp(&[0.3, -0.2]);
        assert!(close(einstein_midpoint(std::slice::from_ref(&x)).unwrap().coords(), x.coords(), 1e-15));
        let neg = kp(&[-0.3, 0.2]);
        assert!(close(einstein_midpoint(&[x, neg]).unwrap().coords(), &[0.0, 0.0], 1e-15));
        let m = einstein_midpoint(&[kp(&[0.8, 0.0]), kp(&[0.0, 0.0])]).unwrap();
        assert!(close(m.coords(), &[0.5, 0.0], 1e-15));
        assert!(matches!(einstein_midpoint(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mobius_add_values() {
        let c = Curvature::default();
        let x = bp(&[0.3, 0.2]);
        assert_eq!(mobius_add(&x, &BallPoint::origin(2), c).unwrap(), x);
        let z = mobius_add(&x, &x.neg(), c).unwrap();
        assert!(close(z.coords(), &[0.0, 0.0], 1e-15));
        let s = mobius_add(&bp(&[0.3, 0.0]), &bp(&[0.4, 0.0]), c).unwrap();
        assert!(close(s.coords(), &[0.625, 0.0], 1e-15));
    }

    #[test]
    fn mobius_matvec_values() {
        let x = bp(&[0.5, 0.0]);
        for cv in [0.5, 1.0, 2.0] {
            let c = Curvature::new(cv).unwrap();
            let y = mobius_matvec(&[1.0, 0.0, 0.0, 1.0], 2, &x, c).unwrap();
            assert!(close(y.coords(), x.coords(), 1e-14));
        }
        let zero = mobius_matvec(&[1.0, 2.0, 3.0, 4.0], 2, &BallPoint::origin(2), Curvature::default()).unwrap();
        assert_eq!(zero.coords(), &[0.0, 0.0]);
        let y = mobius_matvec(&[2.0, 0.0, 0.0, 2.0], 2, &x, Curvature::default()).unwrap();
        assert!(close(y.coords(), &[0.8, 0.0], 1e-14));
        // Mx = 0
        let y = mobius_matvec(&[0.0, 1.0], 1, &x, Curvature::default()).unwrap();
        assert_eq!(y.coords(), &[0.0]);
    }

    #[test]
    fn retract_values() {
        let x = bp(&[0.2, -0.1]);
        assert_eq!(retract(&x, &TangentGrad(vec![0.0, 0.0]), 0.1).unwrap(), x);
        assert_eq!(retract(&x, &TangentGrad(vec![3.0, 1.0]), 0.0).unwrap(), x);
        let y = retract(&BallPoint::origin(2), &TangentGrad(vec![1.0, 0.0]), 0.1).unwrap();
        assert!(close(y.coords(), &[-0.1, 0.0], 1e-16));
    }

    #[test]
    fn ratio_helpers_match_closed_forms() {
        for &t in &[1e-4, 0.01, 0.04, 0.06, 0.5, 2.0] {
            let (v, d) = tanh_ratio(t * t);
            assert!((v - t.tanh() / t).abs() < 1e-13, "t={t}");
            let h = 1e-6 * (t * t).max(1e-3);
            let fd = (tanh_ratio(t * t + h).0 - tanh_ratio(t * t - h).0) / (2.0 * h);
            assert!((d - fd).abs() < 1e-6, "t={t} d={d} fd={fd}");
        }
        for &c in &[0.5, 1.0, 2.0] {
            for &r in &[1e-4, 0.02, 0.1, 0.5, 0.69] {
                let q = r * r;
                let (v, d) = atanh_ratio(q, c);
                let z: f64 = c.sqrt() * r;
                assert!((v - z.atanh() / r).abs() < 1e-12, "c={c} r={r}");
                let h = (1e-6 * q.max(1e-3)).min(0.5 * q);
                let fd = (atanh_ratio(q + h, c).0 - atanh_ratio(q - h, c).0) / (2.0 * h);
                assert!((d - fd).abs() / d.abs().max(1.0) < 1e-6, "c={c} r={r} d={d} fd={fd}");
            }
        }
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(BallPoint::new(vec![]).is_err());
        assert!(BallPoint::new(vec![1.0, 0.0]).is_err());
        assert!(BallPoint::new(vec![f64::NAN]).is_err());
        assert!(KleinPoint::new(vec![1.0]).is_err());
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(-1.0).is_err());
    }
}
