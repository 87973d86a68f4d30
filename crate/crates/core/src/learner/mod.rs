//! Stage 2: a feature extractor trained task by task to land samples near
//! their frozen instance prototypes.
//!
//! Each task minimizes `(1 − λ)·L_cls + λ·L_distil` with plain mini-batch
//! SGD. `L_cls` is the cross-entropy of hyperbolic logits over every
//! instance seen so far; `L_distil` matches the previous model's logits for
//! the old instances on exemplar samples. After a task, herding refills a
//! fixed-size exemplar memory that also drives nearest-mean inference.

mod loss;
mod memory;
mod mlp;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::PrototypeSet;
use crate::error::{Error, Result};

pub use loss::{classification_loss, distillation_loss, embed, hyperbolic_logits, softmax, DistillKind};
pub use memory::{herding_select, nearest_mean, nme_predict, nme_predict_batch, Exemplar, ExemplarMemory};
pub use mlp::{Dense, FeatureExtractor, ForwardCache, Gradients};

/// A labelled input; `label` indexes the instance prototypes and `index` is
/// the sample's position in its dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: usize,
    pub input: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub tau: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    /// Largest Euclidean feature norm fed to the exp map; `None` disables
    /// clipping.
    pub feature_clip: Option<f64>,
    pub distill: DistillKind,
    /// Also distil on current-task samples, not only on exemplars.
    pub distill_current: bool,
    /// ℓ2-normalize features before computing exemplar means.
    pub normalize_means: bool,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.5,
            epochs: 3,
            batch_size: 32,
            lr: 0.01,
            hidden: vec![64, 64],
            feature_clip: Some(1.0),
            distill: DistillKind::CrossEntropy,
            distill_current: false,
            normalize_means: false,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if let Some(r) = self.feature_clip {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig(format!("feature_clip must be positive, got {r}")));
            }
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Current extractor, the frozen copy from the previous task, and the
/// instances seen so far in arrival order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub current: FeatureExtractor,
    pub snapshot: Option<FeatureExtractor>,
    pub seen: Vec<usize>,
    /// Number of tasks trained so far.
    pub task_index: usize,
}

impl ModelState {
    pub fn new(input_dim: usize, embed_dim: usize, cfg: &LearnerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut sizes = vec![input_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(embed_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            current: FeatureExtractor::new(&sizes, &mut rng)?.with_clip(cfg.feature_clip),
            snapshot: None,
            seen: Vec::new(),
            task_index: 0,
        })
    }

    /// Argmax of the hyperbolic logits over seen instances (lower label on
    /// ties).
    pub fn predict_hyperbolic(&self, prototypes: &PrototypeSet, x: &[f64]) -> Result<usize> {
        let z = embed(&self.current, &prototypes.ball, x)?;
        let mut best = None;
        let mut best_d = f64::INFINITY;
        let mut seen = self.seen.clone();
        seen.sort_unstable();
        for y in seen {
            let d = prototypes.ball.distance(&z, prototypes.point(y));
            if d < best_d {
                best_d = d;
                best = Some(y);
            }
        }
        best.ok_or(Error::EmptyRecords)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text checkpoint: a version line, the task index, seen labels, then
    /// each network as a size line followed by one weight and one bias line
    /// per layer (row-major).
    pub fn to_text(&self) -> String {
        let mut s = String::from("hierball-model v1\n");
        let _ = writeln!(s, "task_index {}", self.task_index);
        let _ = writeln!(s, "seen{}", join_prefixed(self.seen.iter()));
        write_net(&mut s, "current", &self.current);
        match &self.snapshot {
            Some(net) => write_net(&mut s, "snapshot", net),
            None => s.push_str("snapshot none\n"),
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| ckpt_err(format!("missing {what}")));
        if next("header")?.trim() != "hierball-model v1" {
            return Err(ckpt_err("unsupported header".into()));
        }
        let task_index = field(next("task_index")?, "task_index")?
            .parse()
            .map_err(|_| ckpt_err("bad task_index".into()))?;
        let seen = parse_list::<usize>(field(next("seen")?, "seen")?)?;
        let current = read_net(&mut next, "current")?.ok_or_else(|| ckpt_err("missing current network".into()))?;
        let snapshot = read_net(&mut next, "snapshot")?;
        Ok(Self {
            current,
            snapshot,
            seen,
            task_index,
        })
    }
}

fn ckpt_err(msg: String) -> Error {
    Error::Format {
        what: "checkpoint",
        msg,
    }
}

fn join_prefixed<T: std::fmt::Display>(it: impl Iterator<Item = T>) -> String {
    it.map(|v| format!(" {v}")).collect()
}

fn field<'a>(line: &'a str, name: &str) -> Result<&'a str> {
    let rest = line
        .strip_prefix(name)
        .ok_or_else(|| ckpt_err(format!("expected `{name}`, got `{line}`")))?;
    Ok(rest.trim())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| ckpt_err(format!("bad number `{t}`"))))
        .collect()
}

fn write_net(s: &mut String, name: &str, net: &FeatureExtractor) {
    let _ = writeln!(s, "{name}{}", join_prefixed(net.sizes().iter()));
    match net.clip {
        Some(r) => {
            let _ = writeln!(s, "clip {r}");
        }
        None => s.push_str("clip none\n"),
    }
    for l in &net.layers {
        let _ = writeln!(s, "w{}", join_prefixed(l.weights.iter()));
        let _ = writeln!(s, "b{}", join_prefixed(l.bias.iter()));
    }
}

fn read_net<'a>(next: &mut impl FnMut(&str) -> Result<&'a str>, name: &str) -> Result<Option<FeatureExtractor>> {
    let head = field(next(name)?, name)?;
    if head == "none" {
        return Ok(None);
    }
    let sizes = parse_list::<usize>(head)?;
    let clip = match field(next("clip")?, "clip")? {
        "none" => None,
        r => Some(r.parse::<f64>().map_err(|_| ckpt_err(format!("bad clip `{r}`")))?),
    };
    let mut net = FeatureExtractor::zeros(&sizes)?.with_clip(clip);
    for l in &mut net.layers {
        let w = parse_list::<f64>(field(next("weights")?, "w")?)?;
        let b = parse_list::<f64>(field(next("bias")?, "b")?)?;
        if w.len() != l.weights.len() || b.len() != l.bias.len() {
            return Err(ckpt_err(format!(
                "layer {}→{} has wrong parameter count",
                l.inputs, l.outputs
            )));
        }
        l.weights = w;
        l.bias = b;
    }
    if !net.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters"));
    }
    Ok(Some(net))
}

/// Mean losses per epoch of one task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub classification: Vec<f64>,
    pub distillation: Vec<f64>,
}

/// Trains on one task. The current network is first copied into the
/// snapshot (from the second task on), then optimized for `cfg.epochs` over
/// the task samples plus the memory exemplars.
pub fn train_task(
    state: &mut ModelState,
    task: &[Sample],
    memory: &ExemplarMemory,
    prototypes: &PrototypeSet,
    cfg: &LearnerConfig,
) -> Result<TaskSummary> {
    cfg.validate()?;
    if task.is_empty() {
        return Err(Error::EmptyTask);
    }
    let mut new_labels: Vec<usize> = Vec::new();
    for s in task {
        if s.label >= prototypes.len() {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                count: prototypes.len(),
            });
        }
        if state.seen.contains(&s.label) {
            return Err(Error::LabelCollision(prototypes.node_order[s.label].clone()));
        }
        if !new_labels.contains(&s.label) {
            new_labels.push(s.label);
        }
    }
    new_labels.sort_unstable();

    let old_classes = {
        let mut v = state.seen.clone();
        v.sort_unstable();
        v
    };
    let distil = state.task_index > 0 && !old_classes.is_empty();
    state.snapshot = if state.task_index > 0 {
        Some(state.current.clone())
    } else {
        None
    };
    state.seen.extend(&new_labels);
    let mut classes = state.seen.clone();
    classes.sort_unstable();

    // (input, label, is_exemplar)
    let mut pool: Vec<(&[f64], usize, bool)> = task.iter().map(|s| (s.input.as_slice(), s.label, false)).collect();
    pool.extend(memory.samples().map(|(y, e)| (e.input.as_slice(), y, true)));

    let lambda = if distil { cfg.lambda } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_add(0x5851_f42d_4c95_7f2d_u64.wrapping_mul(state.task_index as u64 + 1)),
    );
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut summary = TaskSummary::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut cls_sum, mut dis_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| pool[i].0).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| pool[i].1).collect();
            let mut grads = Gradients::zeros_like(&state.current);
            if lambda < 1.0 {
                let (l, g) = classification_loss(&state.current, prototypes, &classes, &inputs, &labels, cfg.tau)?;
                cls_sum += l;
                grads.add_scaled(&g, 1.0 - lambda);
            }
            if lambda > 0.0 {
                let teacher = state.snapshot.as_ref().ok_or(Error::NoSnapshot(state.task_index + 1))?;
                let old_inputs: Vec<&[f64]> = batch
                    .iter()
                    .filter(|&&i| pool[i].2 || cfg.distill_current)
                    .map(|&i| pool[i].0)
                    .collect();
                let (l, g) = distillation_loss(
                    &state.current,
                    teacher,
                    prototypes,
                    &old_classes,
                    &old_inputs,
                    cfg.tau,
                    cfg.distill,
                )?;
                dis_sum += l;
                grads.add_scaled(&g, lambda);
            }
            state.current.sgd_step(&grads, cfg.lr);
            batches += 1;
        }
        if !(cls_sum.is_finite() && dis_sum.is_finite()) || !state.current.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "task {} epoch {epoch}",
                state.task_index + 1
            )));
        }
        summary.classification.push(cls_sum / batches as f64);
        summary.distillation.push(dis_sum / batches as f64);
    }
    state.task_index += 1;
    Ok(summary)
}

/// `(1 − λ)·L_cls + λ·L_distil` on one batch, as used inside
/// [`train_task`]; exposed for gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss(
    net: &FeatureExtractor,
    teacher: &FeatureExtractor,
    prototypes: &PrototypeSet,
    classes: &[usize],
    old_classes: &[usize],
    inputs: &[&[f64]],
    labels: &[usize],
    distil_inputs: &[&[f64]],
    cfg: &LearnerConfig,
) -> Result<(f64, Gradients)> {
    let (lc, gc) = classification_loss(net, prototypes, classes, inputs, labels, cfg.tau)?;
    let (ld, gd) = distillation_loss(
        net,
        teacher,
        prototypes,
        old_classes,
        distil_inputs,
        cfg.tau,
        cfg.distill,
    )?;
    let mut g = Gradients::zeros_like(net);
    g.add_scaled(&gc, 1.0 - cfg.lambda);
    g.add_scaled(&gd, cfg.lambda);
    Ok(((1.0 - cfg.lambda) * lc + cfg.lambda * ld, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BallConfig, BallPoint};
    use rand::Rng;

    fn prototypes(n: usize, dim: usize) -> PrototypeSet {
        let ball = BallConfig::new(dim).unwrap();
        let points = (0..n)
            .map(|i| {
                let mut p = vec![0.0; dim];
                p[i % dim] = if i < dim { 0.7 } else { -0.7 };
                BallPoint::new(p, &ball).unwrap()
            })
            .collect();
        PrototypeSet {
            points,
            node_order: (0..n).map(|i| format!("i{i}")).collect(),
            ball,
        }
    }

    fn samples(labels: &[usize], per: usize, input_dim: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut out = Vec::new();
        for &y in labels {
            for _ in 0..per {
                let input = (0..input_dim)
                    .map(|j| if j == y { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3))
                    .collect();
                out.push(Sample {
                    index: out.len(),
                    input,
                    label: y,
                });
            }
        }
        out
    }

    fn small_cfg() -> LearnerConfig {
        LearnerConfig {
            epochs: 5,
            batch_size: 8,
            lr: 0.05,
            hidden: vec![16],
            ..LearnerConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(LearnerConfig::default().validate().is_ok());
        assert!(LearnerConfig {
            tau: 0.0,
            ..LearnerConfig::default()
        }
        .validate()
        .is_err());
        assert!(LearnerConfig {
            lambda: 1.5,
            ..LearnerConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn first_task_has_no_snapshot_and_rejects_collisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = prototypes(4, 3);
        let cfg = small_cfg();
        let mut st = ModelState::new(4, 3, &cfg).unwrap();
        let t1 = samples(&[0, 1], 10, 4, &mut rng);
        train_task(&mut st, &t1, &ExemplarMemory::new(20), &p, &cfg).unwrap();
        assert!(st.snapshot.is_none());
        assert_eq!(st.seen, vec![0, 1]);
        let err = train_task(&mut st, &t1, &ExemplarMemory::new(20), &p, &cfg).unwrap_err();
        assert!(matches!(err, Error::LabelCollision(_)));
        assert!(matches!(
            train_task(&mut st, &[], &ExemplarMemory::new(20), &p, &cfg),
            Err(Error::EmptyTask)
        ));
        let t2 = samples(&[2], 5, 4, &mut rng);
        train_task(&mut st, &t2, &ExemplarMemory::new(20), &p, &cfg).unwrap();
        assert!(st.snapshot.is_some());
        assert_eq!(st.task_index, 2);
    }

    #[test]
    fn snapshot_is_frozen_and_equals_previous_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = prototypes(4, 3);
        let cfg = small_cfg();
        let mut st = ModelState::new(4, 3, &cfg).unwrap();
        let t1 = samples(&[0, 1], 10, 4, &mut rng);
        let mut mem = ExemplarMemory::new(20);
        train_task(&mut st, &t1, &mem, &p, &cfg).unwrap();
        mem.update(&t1, &st.current, 2).unwrap();
        let after_t1 = st.current.clone();
        let probe = [0.2, 0.9, -0.1, 0.0];
        let t2 = samples(&[2, 3], 10, 4, &mut rng);
        train_task(&mut st, &t2, &mem, &p, &cfg).unwrap();
        let snap = st.snapshot.as_ref().unwrap();
        assert_eq!(snap, &after_t1);
        assert_eq!(snap.forward(&probe).unwrap(), after_t1.forward(&probe).unwrap());
        assert_ne!(st.current, after_t1);
    }

    #[test]
    fn lambda_one_leaves_classification_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = prototypes(4, 3);
        let cfg = LearnerConfig {
            lambda: 1.0,
            ..small_cfg()
        };
        let mut st = ModelState::new(4, 3, &cfg).unwrap();
        let t1 = samples(&[0, 1], 10, 4, &mut rng);
        let mut mem = ExemplarMemory::new(20);
        train_task(&mut st, &t1, &mem, &p, &cfg).unwrap();
        mem.update(&t1, &st.current, 2).unwrap();
        let before = st.current.clone();
        let t2 = samples(&[2, 3], 10, 4, &mut rng);
        let summary = train_task(&mut st, &t2, &mem, &p, &cfg).unwrap();
        assert!(summary.classification.iter().all(|&v| v == 0.0));
        // The student starts as the teacher, so the only objective is already
        // at its minimum and nothing moves.
        assert_eq!(st.current, before);
        assert!(summary.distillation.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn lambda_zero_equals_plain_fine_tuning() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = prototypes(4, 3);
        let cfg = LearnerConfig {
            lambda: 0.0,
            ..small_cfg()
        };
        let mut st = ModelState::new(4, 3, &cfg).unwrap();
        let t1 = samples(&[0, 1], 10, 4, &mut rng);
        let mem = ExemplarMemory::new(20);
        train_task(&mut st, &t1, &mem, &p, &cfg).unwrap();
        let t2 = samples(&[2, 3], 10, 4, &mut rng);
        let mut a = st.clone();
        let mut b = st.clone();
        let sa = train_task(&mut a, &t2, &mem, &p, &cfg).unwrap();
        let sb = train_task(
            &mut b,
            &t2,
            &mem,
            &p,
            &LearnerConfig {
                distill: DistillKind::Mse,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(a.current, b.current);
        assert!(sa.distillation.iter().chain(&sb.distillation).all(|&v| v == 0.0));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = prototypes(3, 3);
        let cfg = LearnerConfig {
            epochs: 30,
            ..small_cfg()
        };
        let t1 = samples(&[0, 1, 2], 15, 4, &mut rng);
        let run = || {
            let mut st = ModelState::new(4, 3, &cfg).unwrap();
            let s = train_task(&mut st, &t1, &ExemplarMemory::new(30), &p, &cfg).unwrap();
            (st, s)
        };
        let (a, sa) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(sa.classification.last().unwrap() < &sa.classification[0]);
        let correct = t1
            .iter()
            .filter(|s| a.predict_hyperbolic(&p, &s.input).unwrap() == s.label)
            .count();
        assert!(correct as f64 / t1.len() as f64 > 0.9, "{correct}");
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = prototypes(3, 3);
        let teacher = FeatureExtractor::new(&[4, 6, 5, 3], &mut rng).unwrap();
        let net = FeatureExtractor::new(&[4, 6, 5, 3], &mut rng).unwrap();
        let data = samples(&[0, 1, 2], 3, 4, &mut rng);
        let data = &data[..8];
        let inputs: Vec<&[f64]> = data.iter().map(|s| s.input.as_slice()).collect();
        let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
        let cfg = LearnerConfig::default();
        let f = |n: &FeatureExtractor| {
            combined_loss(
                n,
                &teacher,
                &p,
                &[0, 1, 2],
                &[0, 1],
                &inputs,
                &labels,
                &inputs[..4],
                &cfg,
            )
            .unwrap()
        };
        let analytic = f(&net).1.flatten();
        let p0 = net.params();
        let h = 1e-6;
        for (i, a) in analytic.iter().enumerate() {
            let mut n = net.clone();
            let mut q = p0.clone();
            q[i] += h;
            n.set_params(&q).unwrap();
            let up = f(&n).0;
            q[i] -= 2.0 * h;
            n.set_params(&q).unwrap();
            let fd = (up - f(&n).0) / (2.0 * h);
            assert!((fd - a).abs() / fd.abs().max(1e-3) < 1e-4, "param {i}: {fd} vs {a}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = prototypes(4, 3);
        let cfg = small_cfg();
        let mut st = ModelState::new(4, 3, &cfg).unwrap();
        let text = st.to_text();
        assert_eq!(ModelState::parse(&text).unwrap(), st);
        let t1 = samples(&[0, 1], 5, 4, &mut rng);
        train_task(&mut st, &t1, &ExemplarMemory::new(20), &p, &cfg).unwrap();
        train_task(
            &mut st,
            &samples(&[3], 5, 4, &mut rng),
            &ExemplarMemory::new(20),
            &p,
            &cfg,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        st.save(&path).unwrap();
        assert_eq!(ModelState::load(&path).unwrap(), st);
        assert!(ModelState::parse("hierball-model v2\n").is_err());
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(ModelState::parse(&truncated).is_err());
    }
}
