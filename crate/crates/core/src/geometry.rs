//! Poincare ball primitives.
//!
//! The d-dimensional Poincare ball with curvature -c (c > 0) is the open ball
//! of radius 1/sqrt(c) equipped with the conformal metric
//!
//! ```text
//! g_x = lambda_x * g_E,    lambda_x = (2 / (1 - c ||x||^2))^2
//! ```
//!
//! Geodesic distance is expressed through Mobius addition,
//!
//! ```text
//! d_c(x, y) = (2 / sqrt(c)) * atanh(sqrt(c) * ||(-x) (+)_c y||),
//! ```
//!
//! which for c = 1 agrees with the arccosh form
//!
//! ```text
//! d(x, y) = acosh(1 + 2 ||x - y||^2 / ((1 - ||x||^2)(1 - ||y||^2))).
//! ```
//!
//! The atanh route is the primary implementation; the arccosh route is kept
//! as an independent cross-check since acosh near 1 loses precision.
//!
//! All optimization in this crate is Riemannian SGD on the ball: Euclidean
//! gradients are rescaled by the inverse metric ((1 - c||x||^2)^2 / 4) and the
//! update is retracted back into the ball with a small boundary margin.

use crate::error::{Error, Result};

/// Retraction margin used by every gradient-update path.
///
/// Geodesic distance diverges at the boundary, so updated points are kept at
/// Euclidean norm at most (1 - BALL_EPS) / sqrt(c).
pub const BALL_EPS: f64 = 1e-5;

/// Cap on the tanh factor of the exponential map so the image stays strictly
/// inside the ball in floating point.
const TANH_CAP: f64 = 1.0 - 1e-12;

/// Positive curvature magnitude `c`; the ball has sectional curvature `-c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidCurvature(c));
        }
        Ok(Curvature(c))
    }

    /// Curvature -1, the value used throughout unless configured otherwise.
    pub fn unit() -> Self {
        Curvature(1.0)
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Euclidean radius of the ball, 1/sqrt(c).
    pub fn radius(self) -> f64 {
        1.0 / self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature::unit()
    }
}

/// A point strictly inside the curvature-c Poincare ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    c: Curvature,
}

impl BallPoint {
    /// Validates that `coords` lies strictly inside the ball.
    pub fn new(coords: Vec<f64>, c: Curvature) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Config("ball point must have dimension >= 1".into()));
        }
        for (i, v) in coords.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(i));
            }
        }
        let sq = sq_norm(&coords);
        let limit = 1.0 / c.get();
        if sq >= limit {
            return Err(Error::OutsideBall { sq_norm: sq, limit });
        }
        Ok(BallPoint { coords, c })
    }

    pub fn origin(dim: usize, c: Curvature) -> Self {
        BallPoint {
            coords: vec![0.0; dim.max(1)],
            c,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    fn check_compatible(&self, other: &BallPoint) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        if self.c != other.c {
            return Err(Error::CurvatureMismatch {
                left: self.c.get(),
                right: other.c.get(),
            });
        }
        Ok(())
    }
}

/// A vector in the tangent space at the origin; carries Euclidean backbone
/// outputs before they are mapped onto the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
}

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        for (i, v) in coords.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(TangentVector { coords })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

pub fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Low-level Poincare-ball operations on raw coordinate slices.
///
/// Preconditions (points inside the ball, matching dimensions) are the
/// caller's responsibility here; the typed [`BallPoint`] API validates them.
#[derive(Debug, Clone, Copy)]
pub struct Ball {
    c: f64,
}

impl Ball {
    pub fn new(c: Curvature) -> Self {
        Ball { c: c.get() }
    }

    pub fn unit() -> Self {
        Ball { c: 1.0 }
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn curvature(&self) -> Curvature {
        Curvature(self.c)
    }

    pub fn radius(&self) -> f64 {
        1.0 / self.c.sqrt()
    }

    /// Conformal factor lambda_x = (2 / (1 - c ||x||^2))^2.
    pub fn conformal_factor(&self, x: &[f64]) -> f64 {
        let t = 2.0 / (1.0 - self.c * sq_norm(x));
        t * t
    }

    /// Mobius addition v (+)_c w.
    pub fn mobius_add(&self, v: &[f64], w: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), w.len());
        let c = self.c;
        let s = dot(v, w);
        let nv = sq_norm(v);
        let nw = sq_norm(w);
        let coef_v = 1.0 + 2.0 * c * s + c * nw;
        let coef_w = 1.0 - c * nv;
        let den = 1.0 + 2.0 * c * s + c * c * nv * nw;
        for i in 0..v.len() {
            out[i] = (coef_v * v[i] + coef_w * w[i]) / den;
        }
        // Rounding can land the result on or past the boundary; nudge it back.
        let limit = self.radius();
        let n = sq_norm(out).sqrt();
        if n >= limit {
            let scale = limit * (1.0 - 1e-15) / n;
            for o in out.iter_mut() {
                *o *= scale;
            }
        }
    }

    /// Euclidean norm of (-x) (+)_c y, evaluated in a cancellation-free form.
    ///
    /// Uses the identity (-x) (+) y = (b * (y - x) - c ||y - x||^2 * x) / den
    /// with b = 1 - c ||x||^2, which is exact at x = y.
    fn mobius_diff_norm(&self, x: &[f64], y: &[f64]) -> f64 {
        let c = self.c;
        let nx = sq_norm(x);
        let ny = sq_norm(y);
        let s = dot(x, y);
        let b = 1.0 - c * nx;
        let den = 1.0 - 2.0 * c * s + c * c * nx * ny;
        let mut dd = 0.0;
        for i in 0..x.len() {
            let d = y[i] - x[i];
            dd += d * d;
        }
        if dd == 0.0 {
            return 0.0;
        }
        let mut num_sq = 0.0;
        for i in 0..x.len() {
            let t = b * (y[i] - x[i]) - c * dd * x[i];
            num_sq += t * t;
        }
        num_sq.max(0.0).sqrt() / den
    }

    /// Geodesic distance d_c(x, y) = (2/sqrt(c)) atanh(sqrt(c) ||(-x)(+)y||).
    pub fn distance(&self, x: &[f64], y: &[f64]) -> f64 {
        let sc = self.c.sqrt();
        let arg = (sc * self.mobius_diff_norm(x, y)).min(1.0 - f64::EPSILON);
        2.0 / sc * arg.atanh()
    }

    /// Distance through the arccosh form; cross-check route only.
    ///
    /// For general c the points are rescaled onto the unit ball, where
    /// d_c(x, y) = d_1(sqrt(c) x, sqrt(c) y) / sqrt(c).
    pub fn distance_arccosh(&self, x: &[f64], y: &[f64]) -> f64 {
        let sc = self.c.sqrt();
        let mut dd = 0.0;
        for i in 0..x.len() {
            let d = sc * (y[i] - x[i]);
            dd += d * d;
        }
        let ax = 1.0 - self.c * sq_norm(x);
        let ay = 1.0 - self.c * sq_norm(y);
        let a = 1.0 + 2.0 * dd / (ax * ay);
        a.acosh() / sc
    }

    /// Geodesic distance from the origin, (2/sqrt(c)) atanh(sqrt(c) ||x||).
    pub fn poincare_norm(&self, x: &[f64]) -> f64 {
        let sc = self.c.sqrt();
        let arg = (sc * sq_norm(x).sqrt()).min(1.0 - f64::EPSILON);
        2.0 / sc * arg.atanh()
    }

    /// Exponential map at the origin: tanh(sqrt(c)||v||) v / (sqrt(c)||v||).
    pub fn exp0(&self, v: &[f64], out: &mut [f64]) {
        let sc = self.c.sqrt();
        let r = sq_norm(v).sqrt();
        if r < 1e-300 {
            out.fill(0.0);
            return;
        }
        let scale = (sc * r).tanh().min(TANH_CAP) / (sc * r);
        for i in 0..v.len() {
            out[i] = scale * v[i];
        }
    }

    /// Euclidean gradient of d_c(x, y) with respect to x.
    ///
    /// Derived by hand from the arccosh form (chain rule through the
    /// argument); for general c evaluated at the unit-ball rescaling, which
    /// leaves the gradient unchanged. Returns false when x and y coincide
    /// and the gradient is undefined.
    #[must_use]
    pub fn distance_grad(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        let sc = self.c.sqrt();
        let n = x.len();
        // Work on the unit ball: u = sqrt(c) x, v = sqrt(c) y.
        let mut nu = 0.0;
        let mut nv = 0.0;
        let mut s = 0.0;
        let mut dd = 0.0;
        for i in 0..n {
            let ui = sc * x[i];
            let vi = sc * y[i];
            nu += ui * ui;
            nv += vi * vi;
            s += ui * vi;
            let d = vi - ui;
            dd += d * d;
        }
        if dd < 1e-30 {
            return false;
        }
        let au = 1.0 - nu;
        let av = 1.0 - nv;
        // A = 1 + 2 dd / (au av); A^2 - 1 computed as (A-1)(A+1) to avoid
        // cancellation for nearby points.
        let a_minus_1 = 2.0 * dd / (au * av);
        let root = (a_minus_1 * (a_minus_1 + 2.0)).sqrt();
        let coef = 4.0 / (au * au * av * root);
        let cu = 1.0 - 2.0 * s + nv;
        for i in 0..n {
            let ui = sc * x[i];
            let vi = sc * y[i];
            out[i] = coef * (cu * ui - au * vi);
        }
        true
    }

    /// Distance together with the Euclidean gradients with respect to both
    /// endpoints, sharing one pass over the coordinates. The bool is false
    /// when the points coincide and no gradient was written.
    pub fn distance_with_grads(
        &self,
        x: &[f64],
        y: &[f64],
        grad_x: &mut [f64],
        grad_y: &mut [f64],
    ) -> (f64, bool) {
        let sc = self.c.sqrt();
        let n = x.len();
        // Work on the unit ball: u = sqrt(c) x, v = sqrt(c) y.
        let mut nu = 0.0;
        let mut nv = 0.0;
        let mut s = 0.0;
        let mut dd = 0.0;
        for i in 0..n {
            let ui = sc * x[i];
            let vi = sc * y[i];
            nu += ui * ui;
            nv += vi * vi;
            s += ui * vi;
            let d = vi - ui;
            dd += d * d;
        }
        let au = 1.0 - nu;
        let av = 1.0 - nv;
        // Distance via the cancellation-free Mobius difference norm.
        let den = 1.0 - 2.0 * s + nu * nv;
        let mut num_sq = 0.0;
        for i in 0..n {
            let ui = sc * x[i];
            let vi = sc * y[i];
            let t = au * (vi - ui) - dd * ui;
            num_sq += t * t;
        }
        let arg = (num_sq.max(0.0).sqrt() / den).min(1.0 - f64::EPSILON);
        let d = 2.0 / sc * arg.atanh();

        if dd < 1e-30 {
            return (d, false);
        }
        let a_minus_1 = 2.0 * dd / (au * av);
        let root = (a_minus_1 * (a_minus_1 + 2.0)).sqrt();
        let coef_x = 4.0 / (au * au * av * root);
        let coef_y = 4.0 / (av * av * au * root);
        let cu = 1.0 - 2.0 * s + nv;
        let cv = 1.0 - 2.0 * s + nu;
        for i in 0..n {
            let ui = sc * x[i];
            let vi = sc * y[i];
            grad_x[i] = coef_x * (cu * ui - au * vi);
            grad_y[i] = coef_y * (cv * vi - av * ui);
        }
        (d, true)
    }

    /// Inverse-metric rescaling of a Euclidean gradient at x:
    /// grad * (1 - c ||x||^2)^2 / 4.
    pub fn riemannian_rescale(&self, grad: &mut [f64], x: &[f64]) {
        let t = 1.0 - self.c * sq_norm(x);
        let scale = t * t / 4.0;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }

    /// Retraction: rescale x to Euclidean norm (1 - eps)/sqrt(c) when it is
    /// on or outside that shell; interior points pass through unchanged.
    pub fn project_in_place(&self, x: &mut [f64], eps: f64) {
        let limit = (1.0 - eps) * self.radius();
        let n = sq_norm(x).sqrt();
        if n >= limit {
            let scale = limit / n;
            for v in x.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Conformal factor lambda_x at a ball point.
pub fn conformal_factor(x: &BallPoint) -> f64 {
    Ball::new(x.curvature()).conformal_factor(x.coords())
}

/// Mobius addition of two points of the same ball.
pub fn mobius_add(v: &BallPoint, w: &BallPoint) -> Result<BallPoint> {
    v.check_compatible(w)?;
    let ball = Ball::new(v.curvature());
    let mut out = vec![0.0; v.dim()];
    ball.mobius_add(v.coords(), w.coords(), &mut out);
    BallPoint::new(out, v.curvature())
}

/// Geodesic distance between two points of the same ball.
pub fn distance(x: &BallPoint, y: &BallPoint) -> Result<f64> {
    x.check_compatible(y)?;
    Ok(Ball::new(x.curvature()).distance(x.coords(), y.coords()))
}

/// Geodesic distance from the origin.
pub fn poincare_norm(x: &BallPoint) -> f64 {
    Ball::new(x.curvature()).poincare_norm(x.coords())
}

/// Exponential map at the origin of the curvature-c ball.
pub fn exp0(v: &TangentVector, c: Curvature) -> BallPoint {
    let ball = Ball::new(c);
    let mut out = vec![0.0; v.coords().len()];
    ball.exp0(v.coords(), &mut out);
    BallPoint { coords: out, c }
}

/// Euclidean gradient of the geodesic distance with respect to its first
/// argument. Errors when the points coincide.
pub fn distance_grad(x: &BallPoint, y: &BallPoint) -> Result<Vec<f64>> {
    x.check_compatible(y)?;
    let ball = Ball::new(x.curvature());
    let mut out = vec![0.0; x.dim()];
    if !ball.distance_grad(x.coords(), y.coords(), &mut out) {
        return Err(Error::CoincidentPoints);
    }
    Ok(out)
}

/// Riemannian SGD gradient conversion: Euclidean gradient times the inverse
/// metric factor at x.
pub fn riemannian_rescale(euclid_grad: &[f64], x: &BallPoint) -> Vec<f64> {
    let ball = Ball::new(x.curvature());
    let mut g = euclid_grad.to_vec();
    ball.riemannian_rescale(&mut g, x.coords());
    g
}

/// Projects an arbitrary vector into the eps-shrunk ball.
pub fn project_to_ball(x: Vec<f64>, c: Curvature, eps: f64) -> Result<BallPoint> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "projection margin {eps} outside (0, 1e-2]"
        )));
    }
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
    }
    let ball = Ball::new(c);
    let mut x = x;
    ball.project_in_place(&mut x, eps);
    BallPoint::new(x, c)
}
