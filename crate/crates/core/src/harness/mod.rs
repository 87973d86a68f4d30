//! End-to-end runs: data, task stream, stage 1, stage 2 per task, and the
//! accuracy matrix, with every artifact written to one output directory.
//!
//! Output layout:
//!
//! | file | content |
//! |---|---|
//! | `config.json` | resolved config, enough to rerun |
//! | `hierarchy.tsv`, `dataset.tsv` | inputs actually used |
//! | `prototypes.tsv` | stage-1 points for every node |
//! | `stage1.json` | stage-1 diagnostics |
//! | `model.txt`, `memory.tsv` | checkpoint after the latest task |
//! | `matrix.partial.json` | grids filled so far |
//! | `metrics.json` | final report |

mod data;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embedding::{extract_leaf_prototypes, run_stage1_with_report, EmbedConfig, PrototypeSet, Stage1Report};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchyTree;
use crate::learner::{nme_predict_batch, train_task, ExemplarMemory, LearnerConfig, ModelState};
use crate::metrics::{AccuracyMatrix, MetricsReport, PredictionRecord};

pub use data::{generate_synthetic, split_tasks, DataRow, Dataset, SyntheticSpec, TaskSplit, TaskStream};

/// Exemplars per instance when no budget is given.
pub const DEFAULT_EXEMPLARS_PER_INSTANCE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Distillation plus exemplar replay, nearest-mean inference.
    #[default]
    Hyperclic,
    /// Fine-tuning on each task alone, hyperbolic argmax inference.
    Naive,
    /// Exemplar replay without distillation, nearest-mean inference.
    ReplayNoDistill,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Hyperclic => "hyperclic",
            Method::Naive => "naive",
            Method::ReplayNoDistill => "replay_no_distill",
        }
    }

    fn uses_memory(self) -> bool {
        self != Method::Naive
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "hyperclic" => Ok(Method::Hyperclic),
            "naive" => Ok(Method::Naive),
            "replay_no_distill" => Ok(Method::ReplayNoDistill),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (expected hyperclic, naive or replay_no_distill)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Tree file; the built-in 3 superclass × 2 class × 2 instance tree if
    /// absent.
    pub hierarchy: Option<PathBuf>,
    /// Dataset file; generated from `synthetic` if absent.
    pub dataset: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub train_fraction: f64,
    pub tasks: usize,
    pub method: Method,
    pub output_dir: PathBuf,
    /// Seeds data generation, task split, stage 1 and stage 2. The seeds
    /// inside `synthetic`, `embed` and `learner` are overwritten with it.
    pub seed: u64,
    /// Total exemplar budget; `5 × #instances` if absent.
    pub memory_budget: Option<usize>,
    pub embed: EmbedConfig,
    pub learner: LearnerConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hierarchy: None,
            dataset: None,
            synthetic: SyntheticSpec::default(),
            train_fraction: 0.75,
            tasks: 3,
            method: Method::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            memory_budget: None,
            embed: EmbedConfig::default(),
            learner: LearnerConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copies the master seed into every component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synthetic.seed = c.seed;
        c.embed.seed = c.seed;
        c.learner.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::InvalidConfig("tasks must be at least 1".into()));
        }
        for p in [&self.hierarchy, &self.dataset].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!("file {} does not exist", p.display())));
            }
        }
        if self.dataset.is_none() {
            self.synthetic.validate()?;
        }
        self.embed.validate()?;
        self.learner.validate()
    }

    pub fn load_tree(&self) -> Result<HierarchyTree> {
        match &self.hierarchy {
            Some(p) => HierarchyTree::load(p),
            None => HierarchyTree::three_level(3, 2, 2),
        }
    }

    pub fn load_dataset(&self, tree: &HierarchyTree) -> Result<Dataset> {
        match &self.dataset {
            Some(p) => Dataset::load(p),
            None => generate_synthetic(tree, &self.synthetic),
        }
    }

    /// Stage-2 settings for the chosen method.
    pub fn learner_for_method(&self) -> LearnerConfig {
        let mut l = self.learner.clone();
        if self.method != Method::Hyperclic {
            l.lambda = 0.0;
        }
        l
    }
}

/// Everything a finished run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub stage1: Stage1Report,
    pub state: ModelState,
    pub memory: ExemplarMemory,
    pub records: Vec<PredictionRecord>,
}

/// Predicts every row in `rows` with the method's inference rule.
pub fn predict_rows(
    method: Method,
    state: &ModelState,
    memory: &ExemplarMemory,
    leaves: &PrototypeSet,
    data: &Dataset,
    rows: &[usize],
    normalize_means: bool,
) -> Result<Vec<usize>> {
    let inputs: Vec<&[f64]> = rows.iter().map(|&i| data.rows[i].features.as_slice()).collect();
    if method.uses_memory() {
        nme_predict_batch(&inputs, memory, &state.current, normalize_means)
    } else {
        inputs.iter().map(|x| state.predict_hyperbolic(leaves, x)).collect()
    }
}

/// Records for every task's test set under the current model.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_stream(
    method: Method,
    state: &ModelState,
    memory: &ExemplarMemory,
    leaves: &PrototypeSet,
    tree: &HierarchyTree,
    data: &Dataset,
    stream: &TaskStream,
    after: usize,
    normalize_means: bool,
) -> Result<Vec<Vec<PredictionRecord>>> {
    let instances = tree.instances();
    stream
        .tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let pred = predict_rows(method, state, memory, leaves, data, &task.test, normalize_means)?;
            Ok(task
                .test
                .iter()
                .zip(pred)
                .map(|(&row, p)| PredictionRecord {
                    truth: instances[stream.row_labels[row]],
                    predicted: instances[p],
                    task: i,
                    after,
                })
                .collect())
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Runs the whole pipeline and writes its artifacts to `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), &cfg)?;

    // Canonical order, so indices match what `hierarchy.tsv` reloads to.
    let tree = HierarchyTree::parse(&cfg.load_tree()?.to_canonical_string())?;
    let data = cfg.load_dataset(&tree)?;
    tree.save(out.join("hierarchy.tsv"))?;
    data.save(out.join("dataset.tsv"))?;
    let stream = split_tasks(&data, &tree, cfg.tasks, cfg.train_fraction, cfg.seed)?;
    stream.verify_disjoint()?;

    let (protos, stage1) = run_stage1_with_report(&tree, &cfg.embed)?;
    protos.save(out.join("prototypes.tsv"))?;
    write_json(&out.join("stage1.json"), &stage1)?;
    log::info!(
        "stage 1: rank correlation {:.3}, cone satisfaction {:.3}",
        stage1.rank_correlation,
        stage1.cone_satisfaction_final
    );
    let leaves = extract_leaf_prototypes(&protos, &tree);

    let learner = cfg.learner_for_method();
    let mut state = ModelState::new(data.input_dim, cfg.embed.dim, &learner)?;
    let budget = cfg
        .memory_budget
        .unwrap_or(DEFAULT_EXEMPLARS_PER_INSTANCE * leaves.len());
    let mut memory = ExemplarMemory::new(budget);
    let no_memory = ExemplarMemory::new(budget);
    let mut matrix = AccuracyMatrix::new(stream.len());
    let mut records = Vec::new();

    for (t, task) in stream.tasks.iter().enumerate() {
        let samples = stream.samples(&data, &task.train);
        let replay = if cfg.method.uses_memory() { &memory } else { &no_memory };
        let summary = train_task(&mut state, &samples, replay, &leaves, &learner)?;
        log::info!(
            "task {}: classification {:?}, distillation {:?}",
            t + 1,
            summary.classification,
            summary.distillation
        );
        if cfg.method.uses_memory() {
            memory.update(&samples, &state.current, state.seen.len())?;
        }
        let per_task = evaluate_stream(
            cfg.method,
            &state,
            &memory,
            &leaves,
            &tree,
            &data,
            &stream,
            t,
            learner.normalize_means,
        )?;
        for (i, rs) in per_task.into_iter().enumerate() {
            matrix.record(i, t, &rs, &tree)?;
            records.extend(rs);
        }
        state.save(out.join("model.txt"))?;
        std::fs::write(out.join("memory.tsv"), memory.to_index_lines(&leaves.node_order))?;
        write_json(&out.join("matrix.partial.json"), &matrix)?;
    }

    let report = MetricsReport::new(cfg.method.as_str(), serde_json::to_value(&cfg)?, matrix)?;
    std::fs::write(out.join("metrics.json"), report.to_json()? + "\n")?;
    Ok(RunOutcome {
        report,
        stage1,
        state,
        memory,
        records,
    })
}

/// Per-task scores of a saved run's final checkpoint on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEvaluation {
    pub method: Method,
    pub instance_accuracy: Vec<f64>,
    pub class_accuracy: Vec<f64>,
    pub superclass_accuracy: Vec<f64>,
    pub lca_severity: Vec<f64>,
}

/// Reloads a run directory and scores its checkpoint on every task's test
/// rows of `data` (the run's own dataset if `None`).
pub fn evaluate_run_dir(dir: &Path, data: Option<&Dataset>) -> Result<CheckpointEvaluation> {
    let cfg = ExperimentConfig::load(dir.join("config.json"))?;
    let tree = HierarchyTree::load(dir.join("hierarchy.tsv"))?;
    let own;
    let data = match data {
        Some(d) => d,
        None => {
            own = Dataset::load(dir.join("dataset.tsv"))?;
            &own
        }
    };
    let protos = PrototypeSet::load(dir.join("prototypes.tsv"))?;
    let leaves = extract_leaf_prototypes(&protos, &tree);
    let state = ModelState::load(dir.join("model.txt"))?;
    let budget = cfg
        .memory_budget
        .unwrap_or(DEFAULT_EXEMPLARS_PER_INSTANCE * leaves.len());
    let memory = ExemplarMemory::from_index_lines(
        &std::fs::read_to_string(dir.join("memory.tsv"))?,
        budget,
        &leaves.node_order,
        &data.inputs(),
    )?;
    let stream = split_tasks(data, &tree, cfg.tasks, cfg.train_fraction, cfg.seed)?;
    let after = state.task_index.saturating_sub(1);
    let per_task = evaluate_stream(
        cfg.method,
        &state,
        &memory,
        &leaves,
        &tree,
        data,
        &stream,
        after,
        cfg.learner.normalize_means,
    )?;
    let mut out = CheckpointEvaluation {
        method: cfg.method,
        instance_accuracy: Vec::new(),
        class_accuracy: Vec::new(),
        superclass_accuracy: Vec::new(),
        lca_severity: Vec::new(),
    };
    for rs in per_task {
        out.instance_accuracy.push(crate::metrics::instance_accuracy(&rs)?);
        out.class_accuracy.push(crate::metrics::class_accuracy(&rs, &tree)?);
        out.superclass_accuracy
            .push(crate::metrics::superclass_accuracy(&rs, &tree)?);
        out.lca_severity.push(crate::metrics::lca_severity(&rs, &tree).value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Metric;

    fn quick(dir: &Path, method: Method, tasks: usize) -> ExperimentConfig {
        ExperimentConfig {
            tasks,
            method,
            output_dir: dir.to_path_buf(),
            synthetic: SyntheticSpec {
                samples_per_instance: 20,
                input_dim: 8,
                ..SyntheticSpec::default()
            },
            embed: EmbedConfig {
                dim: 4,
                poincare_epochs: 20,
                entailment_epochs: 5,
                separation_epochs: 20,
                ..EmbedConfig::default()
            },
            learner: LearnerConfig {
                hidden: vec![16],
                ..LearnerConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn method_parsing() {
        assert_eq!("replay-no-distill".parse::<Method>().unwrap(), Method::ReplayNoDistill);
        assert!("icarl".parse::<Method>().is_err());
        let c: ExperimentConfig = ExperimentConfig::from_json(r#"{"method": "naive", "tasks": 2}"#).unwrap();
        assert_eq!(c.method, Method::Naive);
        assert_eq!(c.learner.tau, 0.1);
        assert_eq!(c.embed.separation_lr, 1.0);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig {
            tasks: 0,
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
        c.tasks = 1;
        c.hierarchy = Some(PathBuf::from("/nonexistent/tree.tsv"));
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_task_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&quick(dir.path(), Method::Hyperclic, 1)).unwrap();
        assert_eq!(out.report.matrix.tasks, 1);
        assert_eq!(out.report.headline.forgetting, None);
        assert!(out.state.snapshot.is_none());
        for f in [
            "config.json",
            "metrics.json",
            "model.txt",
            "memory.tsv",
            "prototypes.tsv",
            "dataset.tsv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn run_is_reproducible_and_reloadable() {
        let a = tempfile::tempdir().unwrap();
        let cfg = quick(a.path(), Method::Hyperclic, 2);
        let first = run_experiment(&cfg).unwrap();
        let first_json = std::fs::read_to_string(a.path().join("metrics.json")).unwrap();
        let second = run_experiment(&cfg).unwrap();
        assert_eq!(first.report, second.report);
        assert_eq!(
            first_json,
            std::fs::read_to_string(a.path().join("metrics.json")).unwrap()
        );

        let eval = evaluate_run_dir(a.path(), None).unwrap();
        let fin = second.report.matrix.grid(Metric::Instance).final_per_task().unwrap();
        assert_eq!(eval.instance_accuracy, fin);
        let ok = second.records.iter().all(|r| r.after < 2 && r.task < 2);
        assert!(ok);
    }

    #[test]
    fn naive_keeps_no_exemplars() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_experiment(&quick(dir.path(), Method::Naive, 2)).unwrap();
        assert!(out.memory.is_empty());
        assert_eq!(out.report.method, "naive");
        let eval = evaluate_run_dir(dir.path(), None).unwrap();
        assert_eq!(
            eval.instance_accuracy,
            out.report.matrix.grid(Metric::Instance).final_per_task().unwrap()
        );
    }
}
