//! Stage 1: one hyperbolic prototype per tree node.
//!
//! [`run_stage1`] optimizes the prototypes in three sequential phases:
//!
//! 1. Riemannian SGD on the softmax distance loss ([`poincare_loss`]) over
//!    the transitive closure, with a reduced-rate burn-in.
//! 2. Riemannian SGD on the max-margin entailment-cone loss
//!    ([`entailment_loss`]); every prototype is kept outside the cones'
//!    inner radius.
//! 3. Gradient steps on the pairwise cosine separation loss
//!    ([`separation_loss`]), moving directions only so that radii survive.

mod cones;
mod poincare;
mod separation;

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BallConfig, BallPoint, DEFAULT_BOUNDARY_EPS};
use crate::hierarchy::{ClosurePair, HierarchyTree, NodeKind};
use crate::stats::spearman;
use crate::vecops::{axpy, dot, norm};

pub use cones::{ConeModel, EnergyGrad, DEFAULT_CONE_K};
pub use poincare::poincare_loss;
pub use separation::separation_loss;

const INIT_RADIUS: f64 = 1e-3;
const CAP_ITERS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub dim: usize,
    pub curvature: f64,
    pub poincare_epochs: usize,
    pub entailment_epochs: usize,
    pub separation_epochs: usize,
    pub poincare_lr: f64,
    pub entailment_lr: f64,
    pub separation_lr: f64,
    /// Entailment margin γ in radians.
    pub margin: f64,
    pub negatives_per_pair: usize,
    pub burn_in_epochs: usize,
    pub burn_in_factor: f64,
    pub batch_size: usize,
    pub cone_k: f64,
    /// Angle scale applied towards the root's axis before the cone phase;
    /// 1 leaves directions untouched.
    pub cone_fold: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            curvature: 1.0,
            poincare_epochs: 150,
            entailment_epochs: 50,
            separation_epochs: 500,
            poincare_lr: 0.1,
            entailment_lr: 0.05,
            separation_lr: 1.0,
            margin: 0.01,
            negatives_per_pair: 10,
            burn_in_epochs: 10,
            burn_in_factor: 0.1,
            batch_size: 10,
            cone_k: DEFAULT_CONE_K,
            cone_fold: 0.5,
            seed: 0,
        }
    }
}

impl EmbedConfig {
    pub fn ball(&self) -> Result<BallConfig> {
        BallConfig::with_curvature(self.dim, self.curvature)
    }

    pub fn validate(&self) -> Result<()> {
        self.ball()?;
        let positive = [
            ("poincare_lr", self.poincare_lr),
            ("entailment_lr", self.entailment_lr),
            ("separation_lr", self.separation_lr),
            ("margin", self.margin),
            ("cone_k", self.cone_k),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.cone_fold > 0.0 && self.cone_fold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "cone_fold must be in (0, 1], got {}",
                self.cone_fold
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Prototypes for every node of a hierarchy, in the tree's index order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub points: Vec<BallPoint>,
    pub node_order: Vec<String>,
    pub ball: BallConfig,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    /// Raw coordinate vectors.
    pub fn coords(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.to_vec()).collect()
    }

    fn from_coords(coords: Vec<Vec<f64>>, node_order: Vec<String>, ball: BallConfig) -> Self {
        let points = coords.into_iter().map(|p| ball.project_raw(p)).collect();
        Self {
            points,
            node_order,
            ball,
        }
    }

    /// `dim<TAB>curvature<TAB>count` header, then `id<TAB>x₀<TAB>…` per node.
    pub fn write_to(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "{}\t{}\t{}", self.ball.dim, self.ball.curvature, self.len())?;
        for (id, p) in self.node_order.iter().zip(&self.points) {
            write!(w, "{id}")?;
            for x in p.iter() {
                write!(w, "\t{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let fmt_err = |msg: String| Error::Format {
            what: "prototype file",
            msg,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| fmt_err("empty file".into()))?;
        let h: Vec<&str> = header.split('\t').collect();
        if h.len() != 3 {
            return Err(fmt_err(format!("bad header `{header}`")));
        }
        let dim: usize = h[0].parse().map_err(|_| fmt_err(format!("bad dim `{}`", h[0])))?;
        let curvature: f64 = h[1].parse().map_err(|_| fmt_err(format!("bad curvature `{}`", h[1])))?;
        let count: usize = h[2].parse().map_err(|_| fmt_err(format!("bad count `{}`", h[2])))?;
        let ball = BallConfig {
            curvature,
            boundary_eps: DEFAULT_BOUNDARY_EPS,
            dim,
        };
        ball.validate()?;
        let mut points = Vec::with_capacity(count);
        let mut node_order = Vec::with_capacity(count);
        for line in lines {
            let mut fields = line.split('\t');
            let id = fields.next().unwrap_or_default().to_string();
            let coords = fields
                .map(|f| f.parse::<f64>().map_err(|_| fmt_err(format!("bad number `{f}`"))))
                .collect::<Result<Vec<_>>>()?;
            points.push(BallPoint::new(coords, &ball)?);
            node_order.push(id);
        }
        if points.len() != count {
            return Err(fmt_err(format!("header says {count} rows, found {}", points.len())));
        }
        Ok(Self {
            points,
            node_order,
            ball,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Points drawn uniformly from the ball of radius 1e−3.
pub fn init_prototypes(tree: &HierarchyTree, cfg: &EmbedConfig) -> Result<PrototypeSet> {
    let ball = cfg.ball()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let coords = (0..tree.len())
        .map(|_| uniform_in_ball(&mut rng, cfg.dim, INIT_RADIUS))
        .collect();
    Ok(PrototypeSet::from_coords(coords, tree.ids().to_vec(), ball))
}

fn uniform_in_ball(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&g);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    g.iter().map(|x| x * r / n).collect()
}

/// `Σ_pos E(u,v) + Σ_neg max(0, γ − E(u',v'))`, pairs given as
/// `(child, apex)`, plus Euclidean gradients for every point.
pub fn entailment_loss(
    cones: &ConeModel,
    points: &[Vec<f64>],
    positives: &[ClosurePair],
    negatives: &[ClosurePair],
    margin: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut grads = vec![vec![0.0; cones.ball.dim]; points.len()];
    let mut total = 0.0;
    for p in positives {
        let eg = cones.energy_grad(&points[p.child], &points[p.ancestor])?;
        total += eg.energy;
        axpy(1.0, &eg.grad_child, &mut grads[p.child]);
        axpy(1.0, &eg.grad_apex, &mut grads[p.ancestor]);
    }
    if margin > 0.0 {
        for n in negatives {
            let eg = cones.energy_grad(&points[n.child], &points[n.ancestor])?;
            if eg.energy < margin {
                total += margin - eg.energy;
                axpy(-1.0, &eg.grad_child, &mut grads[n.child]);
                axpy(-1.0, &eg.grad_apex, &mut grads[n.ancestor]);
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss("entailment loss".into()));
    }
    Ok((total, grads))
}

/// Per-phase measurements gathered while running stage 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub poincare_loss: Vec<f64>,
    pub entailment_loss: Vec<f64>,
    pub separation_loss: Vec<f64>,
    /// Fraction of closure pairs at zero cone energy right after phase 2.
    pub cone_satisfaction_after_entailment: f64,
    /// Same fraction on the final prototypes.
    pub cone_satisfaction_final: f64,
    /// Spearman correlation between hyperbolic and tree distances.
    pub rank_correlation: f64,
}

pub fn run_stage1(tree: &HierarchyTree, cfg: &EmbedConfig) -> Result<PrototypeSet> {
    Ok(run_stage1_with_report(tree, cfg)?.0)
}

pub fn run_stage1_with_report(tree: &HierarchyTree, cfg: &EmbedConfig) -> Result<(PrototypeSet, Stage1Report)> {
    cfg.validate()?;
    let ball = cfg.ball()?;
    let cones = ConeModel { k: cfg.cone_k, ball };
    let init = init_prototypes(tree, cfg)?;
    let mut points = init.coords();
    let closure = tree.transitive_closure();
    let neg_pools: Vec<Vec<usize>> = (0..tree.len()).map(|u| tree.negative_candidates(u)).collect();
    // Separate stream so the init points do not depend on the optimizer.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut report = Stage1Report::default();

    let mut order: Vec<usize> = (0..closure.len()).collect();
    for epoch in 0..cfg.poincare_epochs {
        if closure.is_empty() {
            break;
        }
        let lr = if epoch < cfg.burn_in_epochs {
            cfg.poincare_lr * cfg.burn_in_factor
        } else {
            cfg.poincare_lr
        };
        shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let pairs: Vec<ClosurePair> = batch.iter().map(|&i| closure[i]).collect();
            let negs: Vec<Vec<usize>> = pairs
                .iter()
                .map(|p| crate::hierarchy::sample_from(&neg_pools[p.child], cfg.negatives_per_pair, &mut rng))
                .collect();
            let (loss, grads) = poincare_loss(&ball, &points, &pairs, &negs)?;
            epoch_loss += loss;
            rsgd_step(&ball, &mut points, &grads, lr / pairs.len() as f64);
        }
        check_finite(epoch_loss, "poincare", epoch)?;
        report.poincare_loss.push(epoch_loss / closure.len() as f64);
    }

    if cfg.entailment_epochs > 0 && !closure.is_empty() {
        let min_r = cones.safe_radius();
        align_with_root(&mut points, tree.root(), min_r, cfg.cone_fold);
        push_outside(&mut points, min_r);
        let neg_pairs_pool: Vec<Vec<usize>> = neg_pools
            .iter()
            .enumerate()
            .map(|(u, pool)| pool.iter().copied().filter(|&v| v != u).collect())
            .collect();
        for epoch in 0..cfg.entailment_epochs {
            shuffle(&mut order, &mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let pos: Vec<ClosurePair> = batch.iter().map(|&i| closure[i]).collect();
                let mut neg = Vec::new();
                for p in &pos {
                    for v in crate::hierarchy::sample_from(&neg_pairs_pool[p.child], cfg.negatives_per_pair, &mut rng) {
                        neg.push(ClosurePair {
                            child: p.child,
                            ancestor: v,
                        });
                    }
                }
                let (loss, grads) = entailment_loss(&cones, &points, &pos, &neg, cfg.margin)?;
                epoch_loss += loss;
                rsgd_step(&ball, &mut points, &grads, cfg.entailment_lr / pos.len() as f64);
                push_outside(&mut points, min_r);
            }
            check_finite(epoch_loss, "entailment", epoch)?;
            report.entailment_loss.push(epoch_loss / closure.len() as f64);
        }
    }
    report.cone_satisfaction_after_entailment = cone_satisfaction_of(&cones, &points, &closure);

    if points.len() >= 2 {
        for epoch in 0..cfg.separation_epochs {
            let loss = separation_step(&ball, &mut points, cfg.separation_lr)?;
            check_finite(loss, "separation", epoch)?;
            report.separation_loss.push(loss);
        }
    }

    let set = PrototypeSet::from_coords(points, tree.ids().to_vec(), ball);
    report.cone_satisfaction_final = cone_satisfaction(&set, tree, cfg.cone_k);
    report.rank_correlation = rank_correlation(&set, tree);
    Ok((set, report))
}

fn check_finite(loss: f64, phase: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(format!("{phase} phase, epoch {epoch}")))
    }
}

fn shuffle(order: &mut [usize], rng: &mut impl Rng) {
    use rand::seq::SliceRandom;
    order.shuffle(rng);
}

/// `p ← proj(p − lr · (1 − c‖p‖²)²/4 · ∇p)` for every point.
fn rsgd_step(ball: &BallConfig, points: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) {
    for (p, g) in points.iter_mut().zip(grads) {
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let k = -lr * ball.inverse_metric_factor(p);
        axpy(k, g, p);
        ball.project_in_place(p);
    }
}

/// Puts the root at radius `min_r` on the axis of the smallest spherical
/// cap around the other directions, then rotates every other point towards
/// that axis, scaling its angle by `fold`. Norms are kept.
///
/// A cone at the inner radius is at most a half-space, so the root's
/// descendants have to share a hemisphere before the cone phase can
/// satisfy them; the distance phase leaves them all around the origin.
fn align_with_root(points: &mut [Vec<f64>], root: usize, min_r: f64, fold: f64) {
    let axis = enclosing_cap_centre(points, root);
    points[root] = crate::vecops::scaled(&axis, min_r);
    if fold >= 1.0 {
        return;
    }
    for (i, p) in points.iter_mut().enumerate() {
        let r = norm(p);
        if i == root || r == 0.0 {
            continue;
        }
        let cos = (dot(p, &axis) / r).clamp(-1.0, 1.0);
        let mut perp: Vec<f64> = p.iter().zip(&axis).map(|(x, a)| x / r - cos * a).collect();
        let pn = norm(&perp);
        if pn < 1e-12 {
            // On the axis (or its antipode, which has no preferred side).
            if cos > 0.0 {
                continue;
            }
            perp = vec![0.0; p.len()];
            let j = if axis[0].abs() < 0.9 { 0 } else { 1 };
            perp[j] = 1.0;
            let c = dot(&perp, &axis);
            axpy(-c, &axis.clone(), &mut perp);
        }
        let pn = norm(&perp);
        let theta = cos.acos() * fold;
        for ((x, a), q) in p.iter_mut().zip(&axis).zip(&perp) {
            *x = r * (theta.cos() * a + theta.sin() * q / pn);
        }
    }
}

/// Approximate centre of the smallest spherical cap holding the directions
/// of every point except `skip` (Bădoiu–Clarkson iteration on the sphere).
fn enclosing_cap_centre(points: &[Vec<f64>], skip: usize) -> Vec<f64> {
    let dirs: Vec<Vec<f64>> = points
        .iter()
        .enumerate()
        .filter(|&(i, p)| i != skip && norm(p) > 0.0)
        .map(|(_, p)| crate::vecops::scaled(p, 1.0 / norm(p)))
        .collect();
    let mut c = vec![0.0; points[skip].len()];
    for d in &dirs {
        axpy(1.0, d, &mut c);
    }
    if norm(&c) < 1e-12 {
        c.iter_mut().for_each(|x| *x = 0.0);
        c[0] = 1.0;
    }
    normalize(&mut c);
    for it in 1..=CAP_ITERS {
        let Some(worst) = dirs.iter().min_by(|a, b| dot(a, &c).total_cmp(&dot(b, &c))) else {
            break;
        };
        axpy(1.0 / (it as f64 + 1.0), worst, &mut c);
        normalize(&mut c);
    }
    c
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    v.iter_mut().for_each(|x| *x /= n);
}

fn push_outside(points: &mut [Vec<f64>], min_r: f64) {
    for p in points.iter_mut() {
        let r = norm(p);
        if r == 0.0 {
            p[0] = min_r;
        } else if r < min_r {
            let s = min_r / r;
            p.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// One step on the mean off-diagonal cosine. Each direction moves along
/// the sphere and is renormalized; radii are kept.
fn separation_step(ball: &BallConfig, points: &mut [Vec<f64>], lr: f64) -> Result<f64> {
    let units = separation::unit_directions(points)?;
    let sum = separation::direction_sum(&units);
    let n = points.len() as f64;
    let loss = crate::vecops::norm_sq(&sum) - n;
    let step = lr * 2.0 / (n * (n - 1.0));
    for (p, u) in points.iter_mut().zip(&units) {
        let g = separation::tangent_component(u, &sum);
        let mut dir = u.clone();
        axpy(-step, &g, &mut dir);
        let dn = norm(&dir);
        let r = norm(p);
        for (x, d) in p.iter_mut().zip(&dir) {
            *x = r * d / dn;
        }
        ball.project_in_place(p);
    }
    Ok(loss)
}

fn cone_satisfaction_of(cones: &ConeModel, points: &[Vec<f64>], closure: &[ClosurePair]) -> f64 {
    if closure.is_empty() {
        return 1.0;
    }
    let ok = closure
        .iter()
        .filter(|p| matches!(cones.energy(&points[p.child], &points[p.ancestor]), Ok(e) if e == 0.0))
        .count();
    ok as f64 / closure.len() as f64
}

/// Fraction of closure pairs whose child lies in the ancestor's cone.
/// Ancestors inside the inner radius count as unsatisfied.
pub fn cone_satisfaction(set: &PrototypeSet, tree: &HierarchyTree, cone_k: f64) -> f64 {
    let cones = ConeModel {
        k: cone_k,
        ball: set.ball,
    };
    cone_satisfaction_of(&cones, &set.coords(), &tree.transitive_closure())
}

/// Spearman correlation between hyperbolic and tree distances over all
/// unordered node pairs.
pub fn rank_correlation(set: &PrototypeSet, tree: &HierarchyTree) -> f64 {
    let mut hyp = Vec::new();
    let mut graph = Vec::new();
    for i in 0..tree.len() {
        for j in i + 1..tree.len() {
            hyp.push(set.ball.distance(set.point(i), set.point(j)));
            graph.push(tree.tree_distance(i, j) as f64);
        }
    }
    if hyp.len() < 2 {
        return 1.0;
    }
    spearman(&hyp, &graph)
}

/// Prototypes of instance nodes only, in the tree's instance order.
pub fn extract_leaf_prototypes(set: &PrototypeSet, tree: &HierarchyTree) -> PrototypeSet {
    let idx: Vec<usize> = (0..tree.len())
        .filter(|&u| tree.kind(u) == NodeKind::Instance)
        .collect();
    PrototypeSet {
        points: idx.iter().map(|&u| set.points[u].clone()).collect(),
        node_order: idx.iter().map(|&u| set.node_order[u].clone()).collect(),
        ball: set.ball,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vecops::dot;

    fn small_cfg(dim: usize) -> EmbedConfig {
        EmbedConfig {
            dim,
            poincare_epochs: 30,
            entailment_epochs: 10,
            separation_epochs: 20,
            ..EmbedConfig::default()
        }
    }

    #[test]
    fn init_is_small_and_seeded() {
        let tree = HierarchyTree::three_level(2, 2, 2).unwrap();
        let cfg = small_cfg(5);
        let a = init_prototypes(&tree, &cfg).unwrap();
        assert!(a.points.iter().all(|p| p.norm() <= 1e-3));
        assert_eq!(a, init_prototypes(&tree, &cfg).unwrap());
        let b = init_prototypes(&tree, &EmbedConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn entailment_loss_zero_when_all_satisfied() {
        let ball = BallConfig::new(2).unwrap();
        let cones = ConeModel::new(ball);
        let pts = vec![vec![0.3, 0.0], vec![0.6, 0.0], vec![0.0, 0.6]];
        let pos = [ClosurePair { child: 1, ancestor: 0 }];
        let neg = [ClosurePair { child: 2, ancestor: 0 }];
        assert!(cones.energy(&pts[2], &pts[0]).unwrap() > 0.01);
        let (l, g) = entailment_loss(&cones, &pts, &pos, &neg, 0.01).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn entailment_zero_margin_drops_negatives() {
        let ball = BallConfig::new(2).unwrap();
        let cones = ConeModel::new(ball);
        let pts = vec![vec![0.3, 0.0], vec![0.6, 0.01], vec![0.0, 0.6]];
        let neg = [ClosurePair { child: 1, ancestor: 0 }];
        let (l, _) = entailment_loss(&cones, &pts, &[], &neg, 0.0).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = entailment_loss(&cones, &pts, &[], &neg, 0.5).unwrap();
        assert!(l > 0.0);
    }

    #[test]
    fn entailment_gradient_matches_finite_differences() {
        let tree = HierarchyTree::balanced(2, 2).unwrap();
        assert_eq!(tree.len(), 7);
        let ball = BallConfig::new(3).unwrap();
        let cones = ConeModel::new(ball);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pos = tree.transitive_closure();
        let mut neg = Vec::new();
        for p in &pos {
            for v in tree.negative_candidates(p.child) {
                if v != p.child {
                    neg.push(ClosurePair {
                        child: p.child,
                        ancestor: v,
                    });
                }
            }
        }
        for _ in 0..10 {
            let pts: Vec<Vec<f64>> = (0..7).map(|_| uniform_in_ball(&mut rng, 3, 0.8)).collect();
            let mut pts = pts;
            push_outside(&mut pts, 0.2);
            let margin = 0.3;
            let (_, grads) = entailment_loss(&cones, &pts, &pos, &neg, margin).unwrap();
            let h = 1e-7;
            for i in 0..7 {
                for j in 0..3 {
                    let mut p = pts.clone();
                    let mut m = pts.clone();
                    p[i][j] += h;
                    m[i][j] -= h;
                    let fd = (entailment_loss(&cones, &p, &pos, &neg, margin).unwrap().0
                        - entailment_loss(&cones, &m, &pos, &neg, margin).unwrap().0)
                        / (2.0 * h);
                    assert!(
                        (fd - grads[i][j]).abs() <= 1e-4 * fd.abs().max(1e-1),
                        "{fd} vs {}",
                        grads[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn single_node_tree_passes_through() {
        let tree = HierarchyTree::from_parents(&[None], &[NodeKind::Other]).unwrap();
        let cfg = small_cfg(4);
        let init = init_prototypes(&tree, &cfg).unwrap();
        let out = run_stage1(&tree, &cfg).unwrap();
        assert_eq!(init, out);
    }

    #[test]
    fn stage1_is_deterministic_and_in_ball() {
        let tree = HierarchyTree::three_level(2, 2, 2).unwrap();
        let cfg = small_cfg(5);
        let a = run_stage1(&tree, &cfg).unwrap();
        let b = run_stage1(&tree, &cfg).unwrap();
        assert_eq!(a, b);
        for p in &a.points {
            assert!(p.norm() <= a.ball.max_norm());
        }
    }

    #[test]
    fn poincare_phase_separates_related_from_unrelated() {
        let tree = HierarchyTree::three_level(3, 2, 2).unwrap();
        let cfg = EmbedConfig {
            dim: 5,
            entailment_epochs: 0,
            separation_epochs: 0,
            ..EmbedConfig::default()
        };
        let set = run_stage1(&tree, &cfg).unwrap();
        let closure = tree.transitive_closure();
        let mean_pos = closure
            .iter()
            .map(|p| set.ball.distance(set.point(p.child), set.point(p.ancestor)))
            .sum::<f64>()
            / closure.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut neg = Vec::new();
        for p in &closure {
            for v in tree.sample_negatives(p.child, 5, &mut rng) {
                if v != p.child {
                    neg.push(set.ball.distance(set.point(p.child), set.point(v)));
                }
            }
        }
        let mean_neg = neg.iter().sum::<f64>() / neg.len() as f64;
        assert!(mean_pos < mean_neg, "{mean_pos} vs {mean_neg}");
    }

    #[test]
    fn separation_decreases_monotonically_with_small_lr() {
        let tree = HierarchyTree::three_level(2, 2, 2).unwrap();
        let cfg = EmbedConfig {
            dim: 4,
            poincare_epochs: 20,
            entailment_epochs: 0,
            separation_epochs: 100,
            separation_lr: 0.01,
            ..EmbedConfig::default()
        };
        let (set, report) = run_stage1_with_report(&tree, &cfg).unwrap();
        for w in report.separation_loss.windows(2) {
            assert!(w[1] < w[0], "{:?}", w);
        }
        let (final_loss, _) = separation_loss(&set.coords()).unwrap();
        assert!(final_loss < report.separation_loss[0]);
    }

    #[test]
    fn separation_step_preserves_radii() {
        let ball = BallConfig::new(3).unwrap();
        let mut pts = vec![vec![0.5, 0.1, 0.0], vec![0.4, 0.2, 0.1], vec![0.1, 0.7, 0.0]];
        let radii: Vec<f64> = pts.iter().map(|p| norm(p)).collect();
        separation_step(&ball, &mut pts, 1.0).unwrap();
        for (p, r) in pts.iter().zip(radii) {
            assert!((norm(p) - r).abs() < 1e-14);
        }
        assert!(dot(&pts[0], &pts[1]).is_finite());
    }

    #[test]
    fn align_keeps_norms_and_scales_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| uniform_in_ball(&mut rng, 4, 0.9)).collect();
        let mut folded = pts.clone();
        align_with_root(&mut folded, 0, 0.101, 0.5);
        let axis = crate::vecops::scaled(&folded[0], 1.0 / norm(&folded[0]));
        assert!((norm(&folded[0]) - 0.101).abs() < 1e-15);
        for (p, q) in pts.iter().zip(&folded).skip(1) {
            assert!((norm(p) - norm(q)).abs() < 1e-12);
            let before = (dot(p, &axis) / norm(p)).clamp(-1.0, 1.0).acos();
            let after = (dot(q, &axis) / norm(q)).clamp(-1.0, 1.0).acos();
            assert!((after - 0.5 * before).abs() < 1e-9, "{before} {after}");
        }
        let mut same = pts.clone();
        align_with_root(&mut same, 0, 0.101, 1.0);
        assert_eq!(&same[1..], &pts[1..]);
    }

    #[test]
    fn cap_centre_covers_a_clustered_set() {
        // Directions within 30 degrees of e1; the cap centre must see all of
        // them within that angle.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pts = vec![vec![0.0; 3]];
        for _ in 0..50 {
            let t: f64 = rng.random_range(0.0..30f64.to_radians());
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            pts.push(vec![t.sin() * phi.cos(), t.cos(), t.sin() * phi.sin()]);
        }
        let c = enclosing_cap_centre(&pts, 0);
        for p in &pts[1..] {
            assert!(dot(p, &c) > 30.5f64.to_radians().cos());
        }
    }

    #[test]
    fn leaf_extraction() {
        let tree = HierarchyTree::three_level(1, 2, 2).unwrap();
        let set = init_prototypes(&tree, &small_cfg(3)).unwrap();
        let leaves = extract_leaf_prototypes(&set, &tree);
        assert_eq!(leaves.len(), 4);
        let expected: Vec<String> = tree.instances().iter().map(|&u| tree.id(u).to_string()).collect();
        assert_eq!(leaves.node_order, expected);
        assert!(leaves.node_order.iter().all(|id| id.contains(".i")));
    }

    #[test]
    fn file_round_trip() {
        let tree = HierarchyTree::three_level(1, 2, 2).unwrap();
        let set = run_stage1(&tree, &small_cfg(3)).unwrap();
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("3\t1\t8\n"));
        let back = PrototypeSet::parse(&text).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn file_rejects_bad_rows() {
        assert!(PrototypeSet::parse("2\t1\t1\nx\t0.1\tabc\n").is_err());
        assert!(PrototypeSet::parse("2\t1\t2\nx\t0.1\t0.2\n").is_err());
        assert!(PrototypeSet::parse("2\t1\t1\nx\t0.9\t0.9\n").is_err());
    }
}
