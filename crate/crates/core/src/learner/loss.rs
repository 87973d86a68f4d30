//! Hyperbolic logits and the two stage-2 objectives.

use serde::{Deserialize, Serialize};

use crate::embedding::PrototypeSet;
use crate::error::{Error, Result};
use crate::geometry::{BallConfig, BallPoint};
use crate::vecops::axpy;

use super::mlp::{FeatureExtractor, ForwardCache, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    #[default]
    CrossEntropy,
    KlDivergence,
    Mse,
}

impl std::str::FromStr for DistillKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(Self::CrossEntropy),
            "kl_divergence" | "kl" => Ok(Self::KlDivergence),
            "mse" => Ok(Self::Mse),
            other => Err(Error::InvalidConfig(format!("unknown distillation kind `{other}`"))),
        }
    }
}

/// `exp₀(φ(x))`.
pub fn embed(net: &FeatureExtractor, ball: &BallConfig, x: &[f64]) -> Result<BallPoint> {
    let h = net.forward(x)?;
    ball.exp_map_zero(&h)
}

/// `−d(z, P_y)/τ` for every prototype in the set.
pub fn hyperbolic_logits(z: &[f64], prototypes: &PrototypeSet, tau: f64) -> Vec<f64> {
    prototypes
        .points
        .iter()
        .map(|p| -prototypes.ball.distance(z, p) / tau)
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    // Through the log form so that p and q agree bitwise on equal logits.
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// One sample pushed through extractor, exp map and distances.
pub(crate) struct Pass {
    cache: ForwardCache,
    z: BallPoint,
    pub logits: Vec<f64>,
}

/// Logits restricted to `classes` (indices into `prototypes`).
pub(crate) fn forward_pass(
    net: &FeatureExtractor,
    prototypes: &PrototypeSet,
    classes: &[usize],
    x: &[f64],
    tau: f64,
) -> Result<Pass> {
    let cache = net.forward_cached(x)?;
    let z = prototypes.ball.exp_map_zero_raw(cache.output());
    let logits = classes
        .iter()
        .map(|&y| -prototypes.ball.distance(&z, prototypes.point(y)) / tau)
        .collect();
    Ok(Pass { cache, z, logits })
}

/// Back-propagates `∂L/∂logits` of one pass into `grads`.
pub(crate) fn backward_pass(
    net: &FeatureExtractor,
    prototypes: &PrototypeSet,
    classes: &[usize],
    pass: &Pass,
    grad_logits: &[f64],
    tau: f64,
    grads: &mut Gradients,
) -> Result<()> {
    let ball = &prototypes.ball;
    let mut grad_z = vec![0.0; ball.dim];
    for (&y, &g) in classes.iter().zip(grad_logits) {
        if g == 0.0 {
            continue;
        }
        // d(z, p) is not differentiable at z = p; its subgradient 0 is used.
        match ball.distance_gradient(&pass.z, prototypes.point(y)) {
            Ok((gz, _)) => axpy(-g / tau, &gz, &mut grad_z),
            Err(Error::CoincidentPoints) => {}
            Err(e) => return Err(e),
        }
    }
    let grad_h = ball.exp_map_zero_vjp(pass.cache.output(), &grad_z);
    net.backward(&pass.cache, &grad_h, grads);
    Ok(())
}

fn check_labels(classes: &[usize], n_protos: usize) -> Result<()> {
    if let Some(&bad) = classes.iter().find(|&&y| y >= n_protos) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            count: n_protos,
        });
    }
    Ok(())
}

/// Mean cross-entropy of the softmax over `classes` against each sample's
/// label, with gradients over the extractor parameters.
pub fn classification_loss(
    net: &FeatureExtractor,
    prototypes: &PrototypeSet,
    classes: &[usize],
    inputs: &[&[f64]],
    labels: &[usize],
    tau: f64,
) -> Result<(f64, Gradients)> {
    check_labels(classes, prototypes.len())?;
    let mut grads = Gradients::zeros_like(net);
    if inputs.is_empty() {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for (x, &label) in inputs.iter().zip(labels) {
        let col = classes.iter().position(|&y| y == label).ok_or(Error::LabelOutOfRange {
            label,
            count: classes.len(),
        })?;
        let pass = forward_pass(net, prototypes, classes, x, tau)?;
        let logp = log_softmax(&pass.logits);
        total -= logp[col];
        let mut g: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        g[col] -= 1.0;
        backward_pass(net, prototypes, classes, &pass, &g, tau, &mut grads)?;
    }
    let n = inputs.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// Mean distillation loss between the frozen `teacher` and `net` over the
/// logits of `old_classes`.
pub fn distillation_loss(
    net: &FeatureExtractor,
    teacher: &FeatureExtractor,
    prototypes: &PrototypeSet,
    old_classes: &[usize],
    inputs: &[&[f64]],
    tau: f64,
    kind: DistillKind,
) -> Result<(f64, Gradients)> {
    check_labels(old_classes, prototypes.len())?;
    let mut grads = Gradients::zeros_like(net);
    if inputs.is_empty() || old_classes.is_empty() {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for x in inputs {
        let t = forward_pass(teacher, prototypes, old_classes, x, tau)?.logits;
        let pass = forward_pass(net, prototypes, old_classes, x, tau)?;
        let s = &pass.logits;
        let g: Vec<f64> = match kind {
            DistillKind::CrossEntropy | DistillKind::KlDivergence => {
                let q = softmax(&t);
                let logp = log_softmax(s);
                let ce: f64 = -q.iter().zip(&logp).map(|(qi, lp)| qi * lp).sum::<f64>();
                total += if kind == DistillKind::CrossEntropy {
                    ce
                } else {
                    let logq = log_softmax(&t);
                    ce + q.iter().zip(&logq).map(|(qi, lq)| qi * lq).sum::<f64>()
                };
                logp.iter().zip(&q).map(|(lp, qi)| lp.exp() - qi).collect()
            }
            DistillKind::Mse => {
                let n = s.len() as f64;
                total += s.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
                s.iter().zip(&t).map(|(a, b)| 2.0 * (a - b) / n).collect()
            }
        };
        backward_pass(net, prototypes, old_classes, &pass, &g, tau, &mut grads)?;
    }
    let n = inputs.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}
