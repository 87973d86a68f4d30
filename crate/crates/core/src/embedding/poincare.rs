//! Softmax ranking loss over hyperbolic distances.
//!
//! For a closure pair `(u, v)` with sampled negatives `v'₁ … v'ₖ`:
//!
//! ```text
//! ℓ(u, v) = −log( e^{−d(u,v)} / Σ_{w ∈ {v, v'₁, …, v'ₖ}} e^{−d(u,w)} )
//! ```

use crate::error::{Error, Result};
use crate::geometry::BallConfig;
use crate::hierarchy::ClosurePair;
use crate::vecops::axpy;

const COINCIDENT_NUDGE: f64 = 1e-9;

/// Summed loss over `pairs` and the Euclidean gradient for every point.
/// `negatives[i]` holds the sampled negatives of `pairs[i]`.
pub fn poincare_loss(
    ball: &BallConfig,
    points: &[Vec<f64>],
    pairs: &[ClosurePair],
    negatives: &[Vec<usize>],
) -> Result<(f64, Vec<Vec<f64>>)> {
    assert_eq!(pairs.len(), negatives.len());
    let dim = ball.dim;
    let mut grads = vec![vec![0.0; dim]; points.len()];
    let mut total = 0.0;
    let mut cands = Vec::new();
    let mut dists = Vec::new();
    for (pair, negs) in pairs.iter().zip(negatives) {
        let u = pair.child;
        cands.clear();
        cands.push(pair.ancestor);
        cands.extend_from_slice(negs);
        dists.clear();
        dists.extend(cands.iter().map(|&w| {
            if w == u {
                0.0
            } else {
                ball.distance(&points[u], &points[w])
            }
        }));
        let m = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let z: f64 = dists.iter().map(|d| (m - d).exp()).sum();
        total += dists[0] - m + z.ln();
        for (k, (&w, &d)) in cands.iter().zip(&dists).enumerate() {
            // d(u, u) ≡ 0 contributes nothing.
            if w == u {
                continue;
            }
            let weight = if k == 0 { 1.0 } else { 0.0 } - (m - d).exp() / z;
            let (gu, gw) = distance_gradient_nudged(ball, &points[u], &points[w])?;
            axpy(weight, &gu, &mut grads[u]);
            axpy(weight, &gw, &mut grads[w]);
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss("poincare loss".into()));
    }
    Ok((total, grads))
}

pub(crate) fn distance_gradient_nudged(ball: &BallConfig, a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    match ball.distance_gradient(a, b) {
        Err(Error::CoincidentPoints) => {
            let mut moved = b.to_vec();
            moved[0] += COINCIDENT_NUDGE;
            ball.distance_gradient(a, &moved)
        }
        other => other,
    }
}
