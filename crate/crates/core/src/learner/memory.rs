//! Herding exemplar memory and nearest-mean-of-exemplars inference.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vecops::{axpy, dist_sq, norm};

use super::mlp::FeatureExtractor;
use super::Sample;

/// Greedy mean matching: at step `k` pick the unselected sample that brings
/// the mean of the selection closest to the full mean. Ties go to the lower
/// index. Returns `min(m, n)` indices in selection order.
pub fn herding_select(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let dim = features[0].len();
    let mut mu = vec![0.0; dim];
    for f in features {
        axpy(1.0 / n as f64, f, &mut mu);
    }
    let mut sum = vec![0.0; dim];
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(m.min(n));
    let mut cand = vec![0.0; dim];
    for k in 0..m.min(n) {
        let inv = 1.0 / (k + 1) as f64;
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            for ((c, s), x) in cand.iter_mut().zip(&sum).zip(f) {
                *c = (s + x) * inv;
            }
            let d = dist_sq(&mu, &cand);
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        let i = best.expect("an unselected sample remains");
        taken[i] = true;
        axpy(1.0, &features[i], &mut sum);
        out.push(i);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    /// Position of the sample in its dataset.
    pub index: usize,
    pub input: Vec<f64>,
}

/// Per-instance exemplar lists in herding order, keyed by instance label.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub budget: usize,
    pub lists: BTreeMap<usize, Vec<Exemplar>>,
}

impl ExemplarMemory {
    pub fn new(budget: usize) -> Self {
        Self {
            budget,
            lists: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.lists.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = (usize, &Exemplar)> {
        self.lists
            .iter()
            .flat_map(|(&y, list)| list.iter().map(move |e| (y, e)))
    }

    /// Shrinks old lists to the new quota and herds exemplars for the
    /// instances in `task`. `seen` counts all instances including the new
    /// ones.
    pub fn update(&mut self, task: &[Sample], net: &FeatureExtractor, seen: usize) -> Result<()> {
        let m = self.budget.checked_div(seen).unwrap_or(0);
        if m == 0 {
            return Err(Error::QuotaZero {
                budget: self.budget,
                seen,
            });
        }
        for list in self.lists.values_mut() {
            list.truncate(m);
        }
        let mut by_label: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
        for s in task {
            by_label.entry(s.label).or_default().push(s);
        }
        for (label, samples) in by_label {
            let feats = samples
                .iter()
                .map(|s| net.forward(&s.input))
                .collect::<Result<Vec<_>>>()?;
            let picked = herding_select(&feats, m);
            self.lists.insert(
                label,
                picked
                    .into_iter()
                    .map(|i| Exemplar {
                        index: samples[i].index,
                        input: samples[i].input.clone(),
                    })
                    .collect(),
            );
        }
        Ok(())
    }

    /// Exemplar feature means under the current extractor, by label.
    pub fn class_means(&self, net: &FeatureExtractor, normalize: bool) -> Result<Vec<(usize, Vec<f64>)>> {
        let mut out = Vec::with_capacity(self.lists.len());
        for (&y, list) in &self.lists {
            if list.is_empty() {
                continue;
            }
            let mut mu = vec![0.0; net.output_dim()];
            for e in list {
                let f = feature(net, &e.input, normalize)?;
                axpy(1.0 / list.len() as f64, &f, &mut mu);
            }
            if normalize {
                unit(&mut mu);
            }
            out.push((y, mu));
        }
        Ok(out)
    }

    /// One line per instance: `instance_id<TAB>idx idx …`.
    pub fn to_index_lines(&self, instance_ids: &[String]) -> String {
        let mut s = String::new();
        for (&y, list) in &self.lists {
            let idx: Vec<String> = list.iter().map(|e| e.index.to_string()).collect();
            s.push_str(&format!("{}\t{}\n", instance_ids[y], idx.join(" ")));
        }
        s
    }

    /// Inverse of [`to_index_lines`](Self::to_index_lines); inputs are looked
    /// up in `inputs` by sample index.
    pub fn from_index_lines(text: &str, budget: usize, instance_ids: &[String], inputs: &[Vec<f64>]) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            what: "memory file",
            msg,
        };
        let mut mem = Self::new(budget);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (id, rest) = line.split_once('\t').ok_or_else(|| fmt(format!("bad line `{line}`")))?;
            let y = instance_ids
                .iter()
                .position(|s| s == id)
                .ok_or_else(|| Error::UnknownNode(id.to_string()))?;
            let list = rest
                .split_whitespace()
                .map(|t| {
                    let index: usize = t.parse().map_err(|_| fmt(format!("bad index `{t}`")))?;
                    let input = inputs
                        .get(index)
                        .ok_or_else(|| fmt(format!("index {index} beyond dataset")))?
                        .clone();
                    Ok(Exemplar { index, input })
                })
                .collect::<Result<Vec<_>>>()?;
            mem.lists.insert(y, list);
        }
        Ok(mem)
    }
}

fn unit(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn feature(net: &FeatureExtractor, x: &[f64], normalize: bool) -> Result<Vec<f64>> {
    let mut f = net.forward(x)?;
    if normalize {
        unit(&mut f);
    }
    Ok(f)
}

/// Label of the nearest mean; ties go to the lower label.
pub fn nearest_mean(f: &[f64], means: &[(usize, Vec<f64>)]) -> Option<usize> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (y, mu) in means {
        let d = dist_sq(f, mu);
        if d < best_d || (d == best_d && best.is_some_and(|b| *y < b)) {
            best_d = d;
            best = Some(*y);
        }
    }
    best
}

/// Nearest-mean-of-exemplars prediction in feature space.
pub fn nme_predict(x: &[f64], memory: &ExemplarMemory, net: &FeatureExtractor, normalize: bool) -> Result<usize> {
    let means = memory.class_means(net, normalize)?;
    let f = feature(net, x, normalize)?;
    nearest_mean(&f, &means).ok_or(Error::EmptyRecords)
}

/// Batch form of [`nme_predict`] that computes the means once.
pub fn nme_predict_batch(
    inputs: &[&[f64]],
    memory: &ExemplarMemory,
    net: &FeatureExtractor,
    normalize: bool,
) -> Result<Vec<usize>> {
    let means = memory.class_means(net, normalize)?;
    inputs
        .iter()
        .map(|x| {
            let f = feature(net, x, normalize)?;
            nearest_mean(&f, &means).ok_or(Error::EmptyRecords)
        })
        .collect()
}
