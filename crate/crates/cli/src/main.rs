use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hierball::embedding::{run_stage1_with_report, EmbedConfig};
use hierball::harness::{
    evaluate_run_dir, generate_synthetic, run_experiment, Dataset, ExperimentConfig, Method, SyntheticSpec,
};
use hierball::metrics::MetricsReport;
use hierball::HierarchyTree;

/// Hierarchy-aware continual learning in the Poincaré ball.
#[derive(Parser, Debug)]
#[command(name = "hierball", version)]
struct Cli {
    /// Log progress to stderr (same as RUST_LOG=info).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed a hierarchy into the ball and write one prototype per node.
    EmbedHierarchy {
        /// Tree file (`id<TAB>kind<TAB>parent`).
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with embedding settings; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        curvature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the stage-1 diagnostics as JSON here.
        #[arg(long)]
        diagnostics: Option<PathBuf>,
    },
    /// Generate a synthetic dataset over a hierarchy's instances.
    GenData {
        /// Tree file; the built-in 3×2×2 tree if omitted.
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with generator settings; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        input_dim: Option<usize>,
        #[arg(long)]
        samples_per_instance: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a full experiment from a JSON config.
    Run {
        /// Experiment config; built-in defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory, overriding the config.
        #[arg(long, env = "HIERBALL_OUT_DIR")]
        out_dir: Option<PathBuf>,
        /// hyperclic, naive or replay_no_distill.
        #[arg(long)]
        method: Option<Method>,
        /// Master seed for data, split and both stages.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of tasks the instances are split into.
        #[arg(long)]
        tasks: Option<usize>,
    },
    /// Score a finished run's checkpoint on each task's test rows.
    Evaluate {
        /// Directory written by `run`.
        #[arg(long)]
        run_dir: PathBuf,
        /// Dataset to score on; the run's own dataset if omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn a metrics JSON report into CSV tables.
    Report {
        /// `metrics.json` written by `run`.
        #[arg(long)]
        metrics: PathBuf,
        /// Directory for `grid.csv` and `summary.csv`; summary to stdout if
        /// omitted.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn embed_hierarchy(
    tree: &Path,
    out: &Path,
    config: Option<&Path>,
    dim: Option<usize>,
    curvature: Option<f64>,
    seed: Option<u64>,
    diagnostics: Option<&Path>,
) -> Result<()> {
    let tree = HierarchyTree::load(tree).with_context(|| format!("loading tree {}", tree.display()))?;
    let mut cfg: EmbedConfig = match config {
        Some(p) => read_json(p)?,
        None => EmbedConfig::default(),
    };
    if let Some(d) = dim {
        cfg.dim = d;
    }
    if let Some(c) = curvature {
        cfg.curvature = c;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (protos, report) = run_stage1_with_report(&tree, &cfg)?;
    protos.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("nodes\t{}", protos.len());
    println!("rank_correlation\t{:.4}", report.rank_correlation);
    println!(
        "cone_satisfaction_after_entailment\t{:.4}",
        report.cone_satisfaction_after_entailment
    );
    println!("cone_satisfaction_final\t{:.4}", report.cone_satisfaction_final);
    if let Some(p) = diagnostics {
        std::fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn gen_data(
    tree: Option<&Path>,
    out: &Path,
    spec: Option<&Path>,
    input_dim: Option<usize>,
    samples_per_instance: Option<usize>,
    noise: Option<f64>,
    seed: Option<u64>,
) -> Result<()> {
    let tree = match tree {
        Some(p) => HierarchyTree::load(p).with_context(|| format!("loading tree {}", p.display()))?,
        None => HierarchyTree::three_level(3, 2, 2)?,
    };
    let mut spec: SyntheticSpec = match spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(d) = input_dim {
        spec.input_dim = d;
    }
    if let Some(n) = samples_per_instance {
        spec.samples_per_instance = n;
    }
    if let Some(s) = noise {
        spec.sigma_noise = s;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let data = generate_synthetic(&tree, &spec)?;
    data.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} rows of dimension {} to {}",
        data.rows.len(),
        data.input_dim,
        out.display()
    );
    Ok(())
}

fn run(
    config: Option<&Path>,
    out_dir: Option<PathBuf>,
    method: Option<Method>,
    seed: Option<u64>,
    tasks: Option<usize>,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = out_dir {
        cfg.output_dir = d;
    }
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(t) = tasks {
        cfg.tasks = t;
    }
    let outcome = run_experiment(&cfg)?;
    let h = outcome.report.headline;
    println!("method\t{}", outcome.report.method);
    println!("instance_accuracy\t{:.4}", h.instance_accuracy);
    println!("class_accuracy\t{:.4}", h.class_accuracy);
    println!("superclass_accuracy\t{:.4}", h.superclass_accuracy);
    match h.forgetting {
        Some(f) => println!("forgetting\t{f:.4}"),
        None => println!("forgetting\tn/a"),
    }
    println!("lca_severity\t{:.4}", h.lca_severity);
    println!("report\t{}", cfg.output_dir.join("metrics.json").display());
    Ok(())
}

fn evaluate(run_dir: &Path, dataset: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let data = dataset
        .map(|p| Dataset::load(p).with_context(|| format!("loading dataset {}", p.display())))
        .transpose()?;
    let eval =
        evaluate_run_dir(run_dir, data.as_ref()).with_context(|| format!("evaluating run in {}", run_dir.display()))?;
    let json = serde_json::to_string_pretty(&eval)?;
    match out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn report(metrics: &Path, out_dir: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let report = MetricsReport::from_json(&text).with_context(|| format!("parsing {}", metrics.display()))?;
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("grid.csv"), report.grid_csv())?;
            std::fs::write(dir.join("summary.csv"), report.summary_csv())?;
            println!(
                "wrote {} and {}",
                dir.join("grid.csv").display(),
                dir.join("summary.csv").display()
            );
        }
        None => print!("{}", report.summary_csv()),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::EmbedHierarchy {
            tree,
            out,
            config,
            dim,
            curvature,
            seed,
            diagnostics,
        } => embed_hierarchy(
            &tree,
            &out,
            config.as_deref(),
            dim,
            curvature,
            seed,
            diagnostics.as_deref(),
        ),
        Command::GenData {
            tree,
            out,
            spec,
            input_dim,
            samples_per_instance,
            noise,
            seed,
        } => gen_data(
            tree.as_deref(),
            &out,
            spec.as_deref(),
            input_dim,
            samples_per_instance,
            noise,
            seed,
        ),
        Command::Run {
            config,
            out_dir,
            method,
            seed,
            tasks,
        } => {
            if tasks == Some(0) {
                bail!("--tasks must be at least 1");
            }
            run(config.as_deref(), out_dir, method, seed, tasks)
        }
        Command::Evaluate { run_dir, dataset, out } => evaluate(&run_dir, dataset.as_deref(), out.as_deref()),
        Command::Report { metrics, out_dir } => report(&metrics, out_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
