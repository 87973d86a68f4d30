//! Hyperbolic entailment cones in the Poincaré ball.
//!
//! A cone is rooted at an apex `v` and opens away from the origin with
//! half-aperture `ψ(v) = arcsin(K (1 − ‖v‖²) / ‖v‖)`. `Ξ(v, u)` is the angle
//! at `v` between the outward radial ray and the geodesic towards `u`. The
//! energy `max(0, Ξ − ψ)` is zero exactly when `u` lies in the cone.
//!
//! All formulas are stated for unit curvature; for curvature `c` the
//! coordinates are scaled by `√c` first (angles are conformally invariant).

use crate::error::{Error, Result};
use crate::geometry::BallConfig;
use crate::vecops::{dot, norm_sq};

pub const DEFAULT_CONE_K: f64 = 0.1;

/// Aperture constant plus the ball it lives in.
#[derive(Debug, Clone, Copy)]
pub struct ConeModel {
    pub k: f64,
    pub ball: BallConfig,
}

/// Cone energy and its gradients with respect to child and apex.
#[derive(Debug, Clone)]
pub struct EnergyGrad {
    pub energy: f64,
    pub grad_child: Vec<f64>,
    pub grad_apex: Vec<f64>,
}

impl ConeModel {
    pub fn new(ball: BallConfig) -> Self {
        Self {
            k: DEFAULT_CONE_K,
            ball,
        }
    }

    /// Smallest apex norm (unit curvature) with a defined aperture,
    /// i.e. where `K(1 − r²)/r = 1`.
    pub fn inner_radius_unit(&self) -> f64 {
        ((1.0 + 4.0 * self.k * self.k).sqrt() - 1.0) / (2.0 * self.k)
    }

    /// Norm parents are re-projected to before cone training, in the
    /// ball's own coordinates.
    pub fn safe_radius(&self) -> f64 {
        (self.k + 1e-3) / self.ball.curvature.sqrt()
    }

    fn scaled(&self, p: &[f64]) -> Vec<f64> {
        let s = self.ball.curvature.sqrt();
        p.iter().map(|x| x * s).collect()
    }

    fn check_apex(&self, xs: &[f64]) -> Result<f64> {
        let x2 = norm_sq(xs);
        let r = x2.sqrt();
        let arg = self.k * (1.0 - x2) / r;
        // Also rejects NaN from a zero-norm apex.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(arg <= 1.0) {
            return Err(Error::ConeUndefined {
                norm: r / self.ball.curvature.sqrt(),
                min: self.inner_radius_unit() / self.ball.curvature.sqrt(),
            });
        }
        Ok(arg)
    }

    /// Half-aperture `ψ(v)`.
    pub fn aperture(&self, v: &[f64]) -> Result<f64> {
        let vs = self.scaled(v);
        Ok(self.check_apex(&vs)?.asin())
    }

    /// `Ξ(v, u)`: angle at apex `v` between the outward ray and the
    /// geodesic towards `u`.
    pub fn angle(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        let xs = self.scaled(v);
        let ys = self.scaled(u);
        Ok(angle_cos(&xs, &ys)?.0.clamp(-1.0, 1.0).acos())
    }

    pub fn energy(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        Ok((self.angle(u, v)? - self.aperture(v)?).max(0.0))
    }

    /// Energy plus analytic gradients (zero inside the cone).
    pub fn energy_grad(&self, u: &[f64], v: &[f64]) -> Result<EnergyGrad> {
        let s = self.ball.curvature.sqrt();
        let xs = self.scaled(v);
        let ys = self.scaled(u);
        let arg = self.check_apex(&xs)?;
        let psi = arg.asin();
        let (q, dq_dx, dq_dy) = angle_cos(&xs, &ys)?;
        let q = q.clamp(-1.0, 1.0);
        let xi = q.acos();
        let energy = xi - psi;
        if energy <= 0.0 {
            return Ok(EnergyGrad {
                energy: 0.0,
                grad_child: vec![0.0; u.len()],
                grad_apex: vec![0.0; v.len()],
            });
        }
        // d acos(q) = −dq / √(1 − q²)
        let dacos = -1.0 / (1.0 - q * q).max(1e-300).sqrt();
        let x2 = norm_sq(&xs);
        // dψ/dx = −K (1 + ‖x‖²) x / (‖x‖³ √(1 − arg²))
        let dpsi = -self.k * (1.0 + x2) / (x2 * x2.sqrt() * (1.0 - arg * arg).max(1e-300).sqrt());
        let grad_apex = dq_dx.iter().zip(&xs).map(|(g, x)| s * (dacos * g - dpsi * x)).collect();
        let grad_child = dq_dy.iter().map(|g| s * dacos * g).collect();
        Ok(EnergyGrad {
            energy,
            grad_child,
            grad_apex,
        })
    }
}

/// Cosine of `Ξ(x, y)` for apex `x` and child `y` (unit curvature), with
/// its gradients in both arguments.
fn angle_cos(x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let a = dot(x, y);
    let xx = norm_sq(x);
    let yy = norm_sq(y);
    let e = xx + yy - 2.0 * a;
    let g = 1.0 + xx * yy - 2.0 * a;
    if e <= 0.0 || xx == 0.0 {
        return Err(Error::CoincidentPoints);
    }
    let num = a * (1.0 + xx) - xx * (1.0 + yy);
    let den = (xx * e * g).sqrt();
    let q = num / den;
    let dq_dx = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let dn = (1.0 + xx) * yi + 2.0 * (a - 1.0 - yy) * xi;
            let dlog = xi / xx + (xi - yi) / e + (yy * xi - yi) / g;
            dn / den - q * dlog
        })
        .collect();
    let dq_dy = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let dn = (1.0 + xx) * xi - 2.0 * xx * yi;
            let dlog = (yi - xi) / e + (xx * yi - xi) / g;
            dn / den - q * dlog
        })
        .collect();
    Ok((q, dq_dx, dq_dy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::mobius_add_raw;
    use crate::vecops::norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(dim: usize) -> ConeModel {
        ConeModel::new(BallConfig::new(dim).unwrap())
    }

    /// Angle between the apex's radial direction and the initial tangent
    /// of the geodesic towards `u`, which points along `−v ⊕ u`.
    fn tangent_angle(u: &[f64], v: &[f64], c: f64) -> f64 {
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let t = mobius_add_raw(&neg, u, c);
        (dot(v, &t) / (norm(v) * norm(&t))).clamp(-1.0, 1.0).acos()
    }

    fn random_point(rng: &mut ChaCha8Rng, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = rng.random_range(lo..hi);
        let n = norm(&v);
        v.iter().map(|x| x * r / n).collect()
    }

    #[test]
    fn inner_radius_solves_unit_aperture() {
        let m = model(2);
        let r = m.inner_radius_unit();
        assert!((m.k * (1.0 - r * r) / r - 1.0).abs() < 1e-12);
        assert!(m.safe_radius() > r);
        assert!(matches!(m.aperture(&[0.05, 0.0]), Err(Error::ConeUndefined { .. })));
        assert!(m.aperture(&[m.safe_radius(), 0.0]).is_ok());
    }

    #[test]
    fn point_on_outward_ray_has_zero_energy() {
        let m = model(3);
        let v = [0.3, 0.2, 0.0];
        let u = [0.6, 0.4, 0.0];
        assert!(m.angle(&u, &v).unwrap() < 1e-7);
        assert_eq!(m.energy(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn opposite_point_has_positive_energy() {
        let m = model(2);
        let e = m.energy(&[-0.5, 0.0], &[0.5, 0.0]).unwrap();
        assert!(e > 0.0);
        assert!((m.angle(&[-0.5, 0.0], &[0.5, 0.0]).unwrap() - std::f64::consts::PI).abs() < 1e-7);
    }

    #[test]
    fn closed_form_angle_matches_geodesic_tangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for c in [1.0, 2.5] {
            let m = ConeModel::new(BallConfig::with_curvature(4, c).unwrap());
            let s = c.sqrt();
            for _ in 0..2000 {
                let v = random_point(&mut rng, 4, 0.15 / s, 0.95 / s);
                let u = random_point(&mut rng, 4, 0.0, 0.95 / s);
                let closed = m.angle(&u, &v).unwrap();
                let oracle = tangent_angle(&u, &v, c);
                assert!((closed - oracle).abs() < 1e-6, "{closed} vs {oracle}");
            }
        }
    }

    #[test]
    fn zero_energy_region_matches_angle_oracle() {
        let m = model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut agree = 0;
        let mut inside = 0;
        let mut tested = 0;
        for _ in 0..10_000 {
            let v = random_point(&mut rng, 3, 0.15, 0.9);
            let u = random_point(&mut rng, 3, 0.0, 0.99);
            let psi = (m.k * (1.0 - norm_sq(&v)) / norm(&v)).asin();
            let oracle = tangent_angle(&u, &v, 1.0);
            if (oracle - psi).abs() < 1e-9 {
                continue;
            }
            tested += 1;
            let expect_inside = oracle <= psi;
            let got_inside = m.energy(&u, &v).unwrap() == 0.0;
            inside += expect_inside as usize;
            agree += (expect_inside == got_inside) as usize;
        }
        assert!(inside > 0);
        assert_eq!(agree, tested);
    }

    #[test]
    fn energy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for c in [1.0, 0.7] {
            let m = ConeModel::new(BallConfig::with_curvature(5, c).unwrap());
            let s = c.sqrt();
            let mut checked = 0;
            while checked < 100 {
                let v = random_point(&mut rng, 5, 0.2 / s, 0.9 / s);
                let u = random_point(&mut rng, 5, 0.05 / s, 0.9 / s);
                let eg = m.energy_grad(&u, &v).unwrap();
                if eg.energy < 1e-3 {
                    continue;
                }
                let h = 1e-6;
                for i in 0..5 {
                    let mut up = u.clone();
                    let mut um = u.clone();
                    up[i] += h;
                    um[i] -= h;
                    let fd = (m.energy(&up, &v).unwrap() - m.energy(&um, &v).unwrap()) / (2.0 * h);
                    assert!((fd - eg.grad_child[i]).abs() <= 1e-4 * fd.abs().max(1.0));
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[i] += h;
                    vm[i] -= h;
                    let fd = (m.energy(&u, &vp).unwrap() - m.energy(&u, &vm).unwrap()) / (2.0 * h);
                    assert!((fd - eg.grad_apex[i]).abs() <= 1e-4 * fd.abs().max(1.0));
                }
                checked += 1;
            }
        }
    }
}
