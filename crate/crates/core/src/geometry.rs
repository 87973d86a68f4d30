//! Poincaré-ball primitives with closed-form gradients.
//!
//! Everything here is a pure function of its arguments. Points are plain
//! `f64` slices at the call sites that sit in hot loops; [`BallPoint`] and
//! [`TangentVector`] wrap owned coordinates for the public API.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::{dist_sq, dot, norm, norm_sq, scaled};

pub const DEFAULT_BOUNDARY_EPS: f64 = 1e-5;

/// Curvature, boundary clamp and dimension of a Poincaré ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallConfig {
    pub curvature: f64,
    pub boundary_eps: f64,
    pub dim: usize,
}

impl BallConfig {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_curvature(dim, 1.0)
    }

    pub fn with_curvature(dim: usize, curvature: f64) -> Result<Self> {
        let cfg = Self {
            curvature,
            boundary_eps: DEFAULT_BOUNDARY_EPS,
            dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.curvature > 0.0 && self.curvature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "curvature must be positive, got {}",
                self.curvature
            )));
        }
        if !(self.boundary_eps > 0.0 && self.boundary_eps < 1e-2) {
            return Err(Error::InvalidConfig(format!(
                "boundary_eps must lie in (0, 1e-2), got {}",
                self.boundary_eps
            )));
        }
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "ball dimension must be at least 2, got {}",
                self.dim
            )));
        }
        Ok(())
    }

    #[inline]
    fn sqrt_c(&self) -> f64 {
        self.curvature.sqrt()
    }

    /// Largest Euclidean norm a projected point may have.
    #[inline]
    pub fn max_norm(&self) -> f64 {
        (1.0 - self.boundary_eps) / self.sqrt_c()
    }

    /// Whether `c‖p‖² < 1` holds strictly.
    pub fn contains(&self, p: &[f64]) -> bool {
        all_finite(p) && self.curvature * norm_sq(p) < 1.0
    }

    fn check(&self, p: &[f64], what: &'static str) -> Result<()> {
        if p.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: p.len(),
            });
        }
        if !all_finite(p) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    /// Möbius addition `p1 ⊕_c p2`, projected back inside the clamp shell.
    pub fn mobius_add(&self, p1: &[f64], p2: &[f64]) -> Result<BallPoint> {
        self.check(p1, "mobius_add lhs")?;
        self.check(p2, "mobius_add rhs")?;
        Ok(self.project_raw(mobius_add_raw(p1, p2, self.curvature)))
    }

    /// Geodesic distance `2/√c · artanh(√c ‖−p1 ⊕ p2‖)`.
    ///
    /// The artanh argument is clipped to `1 − boundary_eps`.
    pub fn distance(&self, p1: &[f64], p2: &[f64]) -> f64 {
        if p1 == p2 {
            return 0.0;
        }
        let neg: Vec<f64> = p1.iter().map(|x| -x).collect();
        let m = mobius_add_raw(&neg, p2, self.curvature);
        let sc = self.sqrt_c();
        let arg = sc * norm(&m);
        let limit = 1.0 - self.boundary_eps;
        let arg = if arg > limit {
            log::trace!("distance: clipped artanh argument {arg} to {limit}");
            limit
        } else {
            arg
        };
        2.0 / sc * arg.atanh()
    }

    /// Euclidean gradients of [`distance`](Self::distance) with respect to
    /// both arguments. Zero when the artanh argument is clipped.
    pub fn distance_gradient(&self, p1: &[f64], p2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.curvature;
        let d2 = dist_sq(p1, p2);
        if d2 == 0.0 {
            return Err(Error::CoincidentPoints);
        }
        let alpha = 1.0 - c * norm_sq(p1);
        let beta = 1.0 - c * norm_sq(p2);
        let den = c * d2 + alpha * beta;
        // √c‖−p1 ⊕ p2‖ written without the Möbius sum.
        let arg = (c * d2 / den).sqrt();
        if arg > 1.0 - self.boundary_eps {
            return Ok((vec![0.0; p1.len()], vec![0.0; p2.len()]));
        }
        let root = d2.sqrt() * den.sqrt();
        let k1 = 2.0 / (alpha * root);
        let k2 = 2.0 / (beta * root);
        let g1 = p1
            .iter()
            .zip(p2)
            .map(|(a, b)| k1 * (alpha * (a - b) + c * d2 * a))
            .collect();
        let g2 = p1
            .iter()
            .zip(p2)
            .map(|(a, b)| k2 * (beta * (b - a) + c * d2 * b))
            .collect();
        Ok((g1, g2))
    }

    /// Exponential map at the origin: `tanh(√c‖x‖) · x / (√c‖x‖)`.
    pub fn exp_map_zero(&self, x: &[f64]) -> Result<BallPoint> {
        self.check(x, "exp_map_zero input")?;
        Ok(self.exp_map_zero_raw(x))
    }

    pub(crate) fn exp_map_zero_raw(&self, x: &[f64]) -> BallPoint {
        let n = norm(x);
        if n == 0.0 {
            return BallPoint(vec![0.0; x.len()]);
        }
        let sc = self.sqrt_c();
        let r = (sc * n).tanh() / sc;
        let r = r.min(self.max_norm());
        BallPoint(scaled(x, r / n))
    }

    /// Vector-Jacobian product of [`exp_map_zero`](Self::exp_map_zero):
    /// given `∂L/∂z` returns `∂L/∂x`, including the boundary clamp.
    pub fn exp_map_zero_vjp(&self, x: &[f64], grad_z: &[f64]) -> Vec<f64> {
        let n = norm(x);
        let sc = self.sqrt_c();
        let u = sc * n;
        if u < 1e-3 {
            // f(n) = tanh(u)/u and f'(n)/n from their Taylor series.
            let f = 1.0 - u * u / 3.0 + 2.0 * u.powi(4) / 15.0;
            let fp_over_n = self.curvature * (-2.0 / 3.0 + 8.0 * u * u / 15.0);
            let xg = dot(x, grad_z);
            return grad_z
                .iter()
                .zip(x)
                .map(|(g, xi)| f * g + fp_over_n * xg * xi)
                .collect();
        }
        let t = u.tanh();
        let xg = dot(x, grad_z);
        if t / sc > self.max_norm() {
            // z = r_max · x/‖x‖: only the tangential component survives.
            let k = self.max_norm() / n;
            return grad_z
                .iter()
                .zip(x)
                .map(|(g, xi)| k * (g - xg * xi / (n * n)))
                .collect();
        }
        let f = t / u;
        let sech2 = 1.0 - t * t;
        let fp_over_n = self.curvature * (u * sech2 - t) / u.powi(3);
        grad_z
            .iter()
            .zip(x)
            .map(|(g, xi)| f * g + fp_over_n * xg * xi)
            .collect()
    }

    /// Logarithmic map at the origin, the inverse of
    /// [`exp_map_zero`](Self::exp_map_zero).
    pub fn log_map_zero(&self, p: &[f64]) -> Result<TangentVector> {
        self.check(p, "log_map_zero input")?;
        let n = norm(p);
        if n == 0.0 {
            return Ok(TangentVector(vec![0.0; p.len()]));
        }
        let sc = self.sqrt_c();
        let u = sc * n;
        if u >= 1.0 {
            return Err(Error::NonFinite("log_map_zero of a point outside the ball"));
        }
        Ok(TangentVector(scaled(p, u.atanh() / u)))
    }

    /// Rescale onto the clamp shell when `‖p‖` exceeds [`max_norm`](Self::max_norm).
    pub fn project_to_ball(&self, p: &[f64]) -> Result<BallPoint> {
        self.check(p, "project_to_ball input")?;
        Ok(self.project_raw(p.to_vec()))
    }

    pub(crate) fn project_raw(&self, mut p: Vec<f64>) -> BallPoint {
        self.project_in_place(&mut p);
        BallPoint(p)
    }

    pub(crate) fn project_in_place(&self, p: &mut [f64]) {
        let n = norm(p);
        let max = self.max_norm();
        if n > max {
            let s = max / n;
            p.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Inverse metric at `p` applied to a Euclidean gradient:
    /// `(1 − c‖p‖²)² / 4 · g`.
    pub fn riemannian_rescale(&self, euclid_grad: &[f64], p: &[f64]) -> TangentVector {
        TangentVector(scaled(euclid_grad, self.inverse_metric_factor(p)))
    }

    #[inline]
    pub(crate) fn inverse_metric_factor(&self, p: &[f64]) -> f64 {
        let a = 1.0 - self.curvature * norm_sq(p);
        a * a / 4.0
    }
}

/// Möbius addition without projection or validation.
pub(crate) fn mobius_add_raw(p1: &[f64], p2: &[f64], c: f64) -> Vec<f64> {
    let xy = dot(p1, p2);
    let x2 = norm_sq(p1);
    let y2 = norm_sq(p2);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    p1.iter().zip(p2).map(|(x, y)| (a * x + b * y) / den).collect()
}

fn all_finite(p: &[f64]) -> bool {
    crate::vecops::all_finite(p)
}

/// A point strictly inside the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    pub fn origin(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Wraps coordinates after checking `c‖p‖² < 1`.
    pub fn new(coords: Vec<f64>, ball: &BallConfig) -> Result<Self> {
        ball.check(&coords, "ball point")?;
        if !ball.contains(&coords) {
            return Err(Error::InvalidConfig(format!(
                "point with norm {} lies outside the ball",
                norm(&coords)
            )));
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for BallPoint {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A tangent vector at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if !all_finite(&coords) {
            return Err(Error::NonFinite("tangent vector"));
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for TangentVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}
