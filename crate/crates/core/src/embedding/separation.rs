//! Pairwise cosine separation: `L = 1ᵀ(P̄P̄ᵀ − I)1`, the sum of all
//! off-diagonal cosine similarities between prototype directions.

use crate::error::{Error, Result};
use crate::vecops::{dot, norm};

/// Loss and Euclidean gradients with respect to the raw points.
///
/// Uses `L = ‖Σᵢ p̄ᵢ‖² − n`, so `∂L/∂pᵢ = 2 (I − p̄ᵢp̄ᵢᵀ) S / ‖pᵢ‖`.
pub fn separation_loss(points: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let units = unit_directions(points)?;
    let sum = direction_sum(&units);
    let n = points.len() as f64;
    let loss = dot(&sum, &sum) - n;
    let grads = points
        .iter()
        .zip(&units)
        .map(|(p, u)| {
            let r = norm(p);
            tangent_component(u, &sum).into_iter().map(|g| 2.0 * g / r).collect()
        })
        .collect();
    Ok((loss, grads))
}

pub(crate) fn unit_directions(points: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let r = norm(p);
            if r == 0.0 {
                return Err(Error::ZeroVector(i));
            }
            Ok(p.iter().map(|x| x / r).collect())
        })
        .collect()
}

pub(crate) fn direction_sum(units: &[Vec<f64>]) -> Vec<f64> {
    let dim = units.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; dim];
    for u in units {
        for (s, x) in sum.iter_mut().zip(u) {
            *s += x;
        }
    }
    sum
}

/// `(I − uuᵀ) g` for unit `u`.
pub(crate) fn tangent_component(u: &[f64], g: &[f64]) -> Vec<f64> {
    let k = dot(u, g);
    g.iter().zip(u).map(|(gi, ui)| gi - k * ui).collect()
}
