//! Continual evaluation at instance, class and superclass granularity.
//!
//! Grids are indexed `(i, j)`: the metric on the test set of task `i` after
//! training task `j`, both zero-based in memory and one-based in CSV output.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::HierarchyTree;

/// One test prediction, with node indices into the hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub truth: usize,
    pub predicted: usize,
    /// Task the sample belongs to.
    pub task: usize,
    /// Task after which the prediction was made.
    pub after: usize,
}

fn nonempty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        Err(Error::EmptyRecords)
    } else {
        Ok(())
    }
}

fn fraction(records: &[PredictionRecord], mut hit: impl FnMut(&PredictionRecord) -> Result<bool>) -> Result<f64> {
    nonempty(records)?;
    let mut n = 0usize;
    for r in records {
        n += hit(r)? as usize;
    }
    Ok(n as f64 / records.len() as f64)
}

pub fn instance_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    fraction(records, |r| Ok(r.truth == r.predicted))
}

/// Fraction of predictions whose parent matches the truth's parent.
pub fn class_accuracy(records: &[PredictionRecord], tree: &HierarchyTree) -> Result<f64> {
    fraction(
        records,
        |r| Ok(tree.parent_of(r.truth)? == tree.parent_of(r.predicted)?),
    )
}

/// Fraction of predictions whose grandparent matches the truth's.
pub fn superclass_accuracy(records: &[PredictionRecord], tree: &HierarchyTree) -> Result<f64> {
    fraction(records, |r| {
        Ok(tree.grandparent_of(r.truth)? == tree.grandparent_of(r.predicted)?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LcaSeverity {
    /// Mean edges from the prediction up to its LCA with the truth, over
    /// wrong predictions.
    pub value: f64,
    /// No wrong predictions; `value` is 0.
    pub all_correct: bool,
}

pub fn lca_severity(records: &[PredictionRecord], tree: &HierarchyTree) -> LcaSeverity {
    let mut sum = 0usize;
    let mut wrong = 0usize;
    for r in records.iter().filter(|r| r.truth != r.predicted) {
        let lca = tree.lca(r.predicted, r.truth);
        sum += tree.depth(r.predicted) - tree.depth(lca);
        wrong += 1;
    }
    if wrong == 0 {
        LcaSeverity {
            value: 0.0,
            all_correct: true,
        }
    } else {
        LcaSeverity {
            value: sum as f64 / wrong as f64,
            all_correct: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Instance,
    Class,
    Superclass,
    Lca,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Instance, Metric::Class, Metric::Superclass, Metric::Lca];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Instance => "instance",
            Metric::Class => "class",
            Metric::Superclass => "superclass",
            Metric::Lca => "lca",
        }
    }

    pub fn is_accuracy(self) -> bool {
        self != Metric::Lca
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageMode {
    /// Every `(i, j)` entry, including tasks not trained yet.
    #[default]
    All,
    /// Entries with `i ≤ j` only.
    SeenOnly,
}

/// A `T × T` grid filled cell by cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Grid {
    pub fn new(tasks: usize) -> Self {
        Self {
            cells: vec![vec![None; tasks]; tasks],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        Self {
            cells: rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.cells.len()
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.cells[i][j] = Some(v);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i][j]
    }

    fn full(&self) -> Result<Vec<Vec<f64>>> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| {
                        v.ok_or_else(|| Error::Format {
                            what: "accuracy matrix",
                            msg: format!("entry ({}, {}) missing", i + 1, j + 1),
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn average_mean(&self, mode: AverageMode) -> Result<f64> {
        let g = self.full()?;
        let t = g.len();
        if t == 0 {
            return Err(Error::EmptyRecords);
        }
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, row) in g.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                if mode == AverageMode::All || i <= j {
                    sum += v;
                    n += 1;
                }
            }
        }
        Ok(sum / n as f64)
    }

    /// `1/(T−1) · Σ_{i<T} [max_{i≤j<T} A(i,j) − A(i,T)]`, one-based.
    pub fn average_forgetting(&self) -> Result<f64> {
        let g = self.full()?;
        let t = g.len();
        if t < 2 {
            return Err(Error::TooFewTasks(t));
        }
        let last = t - 1;
        let total: f64 = (0..last)
            .map(|i| {
                let best = g[i][i..last].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                best - g[i][last]
            })
            .sum();
        Ok(total / last as f64)
    }

    /// Last column: every task's value after the final task.
    pub fn final_per_task(&self) -> Result<Vec<f64>> {
        let g = self.full()?;
        let last = g.len().checked_sub(1).ok_or(Error::EmptyRecords)?;
        Ok(g.iter().map(|row| row[last]).collect())
    }
}

/// Trailing moving average with a window clipped at the start.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(w);
            values[lo..=k].iter().sum::<f64>() / (k + 1 - lo) as f64
        })
        .collect()
}

/// One grid per metric plus the LCA all-correct flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub tasks: usize,
    pub grids: BTreeMap<Metric, Grid>,
    pub lca_all_correct: Vec<Vec<bool>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            grids: Metric::ALL.iter().map(|&m| (m, Grid::new(tasks))).collect(),
            lca_all_correct: vec![vec![false; tasks]; tasks],
        }
    }

    /// Fills cell `(i, j)` of every grid from the records of that pair.
    pub fn record(&mut self, i: usize, j: usize, records: &[PredictionRecord], tree: &HierarchyTree) -> Result<()> {
        if i >= self.tasks || j >= self.tasks {
            return Err(Error::Format {
                what: "accuracy matrix",
                msg: format!("cell ({}, {}) outside a {}-task grid", i + 1, j + 1, self.tasks),
            });
        }
        let lca = lca_severity(records, tree);
        let values = [
            (Metric::Instance, instance_accuracy(records)?),
            (Metric::Class, class_accuracy(records, tree)?),
            (Metric::Superclass, superclass_accuracy(records, tree)?),
            (Metric::Lca, lca.value),
        ];
        for (m, v) in values {
            self.grids.get_mut(&m).expect("all metrics present").set(i, j, v);
        }
        self.lca_all_correct[i][j] = lca.all_correct;
        Ok(())
    }

    /// Groups records by `(task, after)` and fills every cell.
    pub fn from_records(tasks: usize, records: &[PredictionRecord], tree: &HierarchyTree) -> Result<Self> {
        let mut by_cell: BTreeMap<(usize, usize), Vec<PredictionRecord>> = BTreeMap::new();
        for r in records {
            by_cell.entry((r.task, r.after)).or_default().push(*r);
        }
        let mut m = Self::new(tasks);
        for ((i, j), rs) in by_cell {
            m.record(i, j, &rs, tree)?;
        }
        Ok(m)
    }

    pub fn grid(&self, m: Metric) -> &Grid {
        &self.grids[&m]
    }

    pub fn summary(&self) -> Result<BTreeMap<Metric, Aggregates>> {
        self.grids
            .iter()
            .map(|(&m, g)| {
                Ok((
                    m,
                    Aggregates {
                        average_mean_all: g.average_mean(AverageMode::All)?,
                        average_mean_seen: g.average_mean(AverageMode::SeenOnly)?,
                        average_forgetting: if m.is_accuracy() && self.tasks >= 2 {
                            Some(g.average_forgetting()?)
                        } else {
                            None
                        },
                        final_per_task: g.final_per_task()?,
                    },
                ))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub average_mean_all: f64,
    pub average_mean_seen: f64,
    pub average_forgetting: Option<f64>,
    pub final_per_task: Vec<f64>,
}

/// Everything a run reports: config echo, grids and aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub config: serde_json::Value,
    /// Averaging convention used for the headline numbers.
    pub average_mode: AverageMode,
    pub headline: Headline,
    pub matrix: AccuracyMatrix,
    pub aggregates: BTreeMap<Metric, Aggregates>,
}

/// The five headline numbers: average-mean accuracy at each granularity,
/// instance forgetting, and average-mean LCA severity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub instance_accuracy: f64,
    pub class_accuracy: f64,
    pub superclass_accuracy: f64,
    /// `None` for a single task.
    pub forgetting: Option<f64>,
    pub lca_severity: f64,
}

impl MetricsReport {
    pub fn new(method: &str, config: serde_json::Value, matrix: AccuracyMatrix) -> Result<Self> {
        let mode = AverageMode::All;
        let mean = |m: Metric| matrix.grid(m).average_mean(mode);
        let headline = Headline {
            instance_accuracy: mean(Metric::Instance)?,
            class_accuracy: mean(Metric::Class)?,
            superclass_accuracy: mean(Metric::Superclass)?,
            forgetting: if matrix.tasks >= 2 {
                Some(matrix.grid(Metric::Instance).average_forgetting()?)
            } else {
                None
            },
            lca_severity: mean(Metric::Lca)?,
        };
        Ok(Self {
            method: method.to_string(),
            config,
            average_mode: mode,
            headline,
            aggregates: matrix.summary()?,
            matrix,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `metric,i,j,value` per grid cell, one-based task numbers.
    pub fn grid_csv(&self) -> String {
        let mut s = String::from("metric,i,j,value\n");
        for (m, g) in &self.matrix.grids {
            for (i, row) in g.cells.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        let _ = writeln!(s, "{m},{},{},{v}", i + 1, j + 1);
                    }
                }
            }
        }
        s
    }

    /// `metric,statistic,task,value` for the aggregates; `task` is empty for
    /// scalars.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,statistic,task,value\n");
        for (m, a) in &self.aggregates {
            let _ = writeln!(s, "{m},average_mean_all,,{}", a.average_mean_all);
            let _ = writeln!(s, "{m},average_mean_seen,,{}", a.average_mean_seen);
            if let Some(f) = a.average_forgetting {
                let _ = writeln!(s, "{m},average_forgetting,,{f}");
            }
            for (i, v) in a.final_per_task.iter().enumerate() {
                let _ = writeln!(s, "{m},final,{},{v}", i + 1);
            }
        }
        s
    }
}
