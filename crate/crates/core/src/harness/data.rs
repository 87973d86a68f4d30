//! Synthetic hierarchical Gaussian data and the task stream over it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyTree, NodeKind};
use crate::learner::Sample;

/// Nested Gaussian centres: superclass around the origin, class around its
/// superclass, instance around its class, samples around their instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub input_dim: usize,
    pub samples_per_instance: usize,
    pub sigma_superclass: f64,
    pub sigma_class: f64,
    pub sigma_instance: f64,
    pub sigma_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            input_dim: 32,
            samples_per_instance: 80,
            sigma_superclass: 4.0,
            sigma_class: 2.0,
            sigma_instance: 1.0,
            sigma_noise: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (s, c, i) = (self.sigma_superclass, self.sigma_class, self.sigma_instance);
        if !(s > c && c > i && i > 0.0 && s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "need sigma_superclass > sigma_class > sigma_instance > 0, got {s}, {c}, {i}"
            )));
        }
        if !(self.sigma_noise >= 0.0 && self.sigma_noise.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_noise must be non-negative, got {}",
                self.sigma_noise
            )));
        }
        if self.input_dim == 0 || self.samples_per_instance < 2 {
            return Err(Error::InvalidConfig(
                "input_dim must be positive and samples_per_instance at least 2".into(),
            ));
        }
        Ok(())
    }

    fn sigma(&self, kind: NodeKind) -> f64 {
        match kind {
            NodeKind::Instance => self.sigma_instance,
            NodeKind::Class => self.sigma_class,
            NodeKind::Superclass | NodeKind::Other => self.sigma_superclass,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataRow {
    pub instance: String,
    pub features: Vec<f64>,
}

/// Header `n_samples<TAB>input_dim`, then `instance_id<TAB>x1<TAB>x2…`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub rows: Vec<DataRow>,
}

impl Dataset {
    pub fn to_text(&self) -> String {
        let mut s = format!("{}\t{}\n", self.rows.len(), self.input_dim);
        for r in &self.rows {
            s.push_str(&r.instance);
            for x in &r.features {
                let _ = write!(s, "\t{x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse { line, msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty dataset".into()))?;
        let head: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(1, format!("bad header field `{t}`"))))
            .collect::<Result<_>>()?;
        let [n, dim] = head[..] else {
            return Err(err(1, "header needs `n_samples input_dim`".into()));
        };
        let mut rows = Vec::with_capacity(n);
        for (i, line) in lines {
            let mut fields = line.split('\t');
            let instance = fields.next().unwrap_or_default().trim().to_string();
            let features: Vec<f64> = fields
                .map(|t| t.trim().parse().map_err(|_| err(i + 1, format!("bad number `{t}`"))))
                .collect::<Result<_>>()?;
            if features.len() != dim {
                return Err(err(i + 1, format!("expected {dim} features, got {}", features.len())));
            }
            if features.iter().any(|x| !x.is_finite()) {
                return Err(err(i + 1, "non-finite feature".into()));
            }
            rows.push(DataRow { instance, features });
        }
        if rows.len() != n {
            return Err(err(1, format!("header says {n} rows, found {}", rows.len())));
        }
        Ok(Self { input_dim: dim, rows })
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.features.clone()).collect()
    }
}

/// Draws a dataset over the tree's instances, grouped by instance in tree
/// order. Deterministic under `spec.seed`.
pub fn generate_synthetic(tree: &HierarchyTree, spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let gauss = |sigma: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let mut centres = vec![Vec::new(); tree.len()];
    for u in tree.bfs_order() {
        centres[u] = match tree.parent(u) {
            None => vec![0.0; d],
            Some(p) => {
                let offset = gauss(spec.sigma(tree.kind(u)), &mut rng);
                centres[p].iter().zip(offset).map(|(a, b)| a + b).collect()
            }
        };
    }
    let mut rows = Vec::new();
    for u in tree.instances() {
        for _ in 0..spec.samples_per_instance {
            let noise = gauss(spec.sigma_noise, &mut rng);
            rows.push(DataRow {
                instance: tree.id(u).to_string(),
                features: centres[u].iter().zip(noise).map(|(a, b)| a + b).collect(),
            });
        }
    }
    Ok(Dataset { input_dim: d, rows })
}

/// One task: its instances (as learner labels) and row indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Tasks over disjoint instance groups. Labels index `tree.instances()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskSplit>,
    /// Label of every dataset row.
    pub row_labels: Vec<usize>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Fails if an instance appears in two tasks.
    pub fn verify_disjoint(&self) -> Result<()> {
        let mut owner = BTreeMap::new();
        for (t, task) in self.tasks.iter().enumerate() {
            for &y in &task.labels {
                if let Some(prev) = owner.insert(y, t) {
                    return Err(Error::Format {
                        what: "task stream",
                        msg: format!("label {y} in tasks {} and {}", prev + 1, t + 1),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn samples(&self, data: &Dataset, rows: &[usize]) -> Vec<Sample> {
        rows.iter()
            .map(|&i| Sample {
                index: i,
                input: data.rows[i].features.clone(),
                label: self.row_labels[i],
            })
            .collect()
    }
}

/// Shuffles the instances present in `data` into `tasks` near-equal
/// groups, and splits each instance's rows into train and test.
pub fn split_tasks(
    data: &Dataset,
    tree: &HierarchyTree,
    tasks: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<TaskStream> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if tasks == 0 {
        return Err(Error::InvalidConfig("need at least one task".into()));
    }
    let instances = tree.instances();
    let label_of: BTreeMap<usize, usize> = instances.iter().enumerate().map(|(y, &u)| (u, y)).collect();
    let mut row_labels = Vec::with_capacity(data.rows.len());
    let mut rows_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in data.rows.iter().enumerate() {
        let u = tree.index_of(&r.instance)?;
        let y = *label_of.get(&u).ok_or_else(|| Error::Format {
            what: "dataset",
            msg: format!(
                "row {} names `{}`, which is a {} node, not an instance",
                i + 1,
                r.instance,
                tree.kind(u)
            ),
        })?;
        row_labels.push(y);
        rows_of.entry(y).or_default().push(i);
    }
    let mut present: Vec<usize> = rows_of.keys().copied().collect();
    if tasks > present.len() {
        return Err(Error::TooManyTasks {
            tasks,
            instances: present.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    present.shuffle(&mut rng);

    let base = present.len() / tasks;
    let extra = present.len() % tasks;
    let mut out = Vec::with_capacity(tasks);
    let mut start = 0;
    for t in 0..tasks {
        let size = base + usize::from(t < extra);
        let mut labels = present[start..start + size].to_vec();
        start += size;
        labels.sort_unstable();
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for y in &labels {
            let mut rows = rows_of[y].clone();
            rows.shuffle(&mut rng);
            let n = rows.len();
            let k = if n < 2 {
                n
            } else {
                ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1)
            };
            train.extend_from_slice(&rows[..k]);
            test.extend_from_slice(&rows[k..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        out.push(TaskSplit { labels, train, test });
    }
    let stream = TaskStream { tasks: out, row_labels };
    stream.verify_disjoint()?;
    Ok(stream)
}
