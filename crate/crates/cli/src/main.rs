use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use triadic_core::calculus::{GRAD_REL_TOL, HESS_REL_TOL};
use triadic_core::evaluation::{comparable_log_loss_for, curve_to_csv, test_accuracy, PredictionMode};
use triadic_core::optimizer::{self, OptimizerConfig};
use triadic_core::selection::{SelectionStrategy, StrategyKind};
use triadic_core::simulator::{self, ExperimentConfig, TruthConfig};
use triadic_core::store::{self, Checkpoint};
use triadic_core::{ModelKind, PriorConfig};
use triadic_service::ServiceConfig;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] triadic_core::Error),
    #[error(transparent)]
    Service(#[from] triadic_service::ServiceError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Check(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_owned(), source }
}

/// Similarity embeddings from "which of B or C is more like A?" answers.
#[derive(Debug, Parser)]
#[command(name = "triadic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    /// Forced choice between B and C.
    Two,
    /// B, C or NEITHER with one shared kernel.
    Three,
    /// B, C or NEITHER with a per-user kernel.
    Personalized,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Two => ModelKind::TwoAnswer,
            ModelArg::Three => ModelKind::ThreeAnswer,
            ModelArg::Personalized => ModelKind::Personalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Random,
    Entropy,
    Infogain,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => StrategyKind::Random,
            StrategyArg::Entropy => StrategyKind::Entropy,
            StrategyArg::Infogain => StrategyKind::InfoGain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// The shared embedding.
    Global,
    /// A personalized model's shared embedding.
    Identity,
    /// Each answer scored with its own user's kernel.
    Personalized,
}

impl From<ModeArg> for PredictionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Global => PredictionMode::Global,
            ModeArg::Identity => PredictionMode::IdentityUser,
            ModeArg::Personalized => PredictionMode::Personalized,
        }
    }
}

#[derive(Debug, clap::Args)]
struct FitArgs {
    /// Random restarts.
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    /// Newton iterations per restart.
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Stop when the relative loss change falls below this.
    #[arg(long, default_value_t = 1e-6)]
    rel_tol: f64,
}

impl FitArgs {
    fn config(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig { restarts: self.restarts, max_iters: self.max_iters, rel_tol: self.rel_tol, seed, ..Default::default() }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load a dataset file and print a summary.
    Validate {
        /// Dataset file, one JSON object per line.
        dataset: PathBuf,
    },
    /// Run active-learning rounds against synthetic workers.
    Simulate {
        #[arg(long, default_value_t = 30)]
        objects: usize,
        /// Dimension of both the truth and the fitted embedding.
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        users: usize,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        /// Model to run; repeat to compare several on the same truth.
        #[arg(long = "model", value_enum, default_values_t = [ModelArg::Three])]
        models: Vec<ModelArg>,
        #[arg(long, value_enum, default_value_t = StrategyArg::Infogain)]
        strategy: StrategyArg,
        /// Multiplier on true squared distances; large values mean near-deterministic answers.
        #[arg(long, default_value_t = 1.0)]
        distance_scale: f64,
        /// Standard deviation of the true per-user ln u.
        #[arg(long, default_value_t = 0.18)]
        user_spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the dataset, logs, checkpoints and curve.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Fit an embedding to an observation file.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long, value_enum, default_value_t = ModelArg::Three)]
        model: ModelArg,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also train on TEST-role answers.
        #[arg(long)]
        include_test: bool,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Score a checkpoint on held-out answers.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test_observations: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Global)]
        mode: ModeArg,
    },
    /// Compare analytic derivatives with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        points: usize,
    },
    /// Run the HTTP service.
    Serve {
        /// TOML settings file; TRIADIC_* environment variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write checkpoint coordinates as a CSV table.
    ExportEmbedding {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset file, to add names and clusters.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn validate(dataset: &Path) -> Result<()> {
    let ds = store::load_dataset(dataset)?;
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in ds.records() {
        *sizes.entry(r.cluster.as_str()).or_default() += 1;
    }
    let clusters: Vec<String> = sizes.iter().map(|(c, n)| format!("{c} ({n})")).collect();
    println!("{}: {} objects, {} clusters: {}", dataset.display(), ds.len(), ds.cluster_count(), clusters.join(", "));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    truth_cfg: TruthConfig,
    rounds: usize,
    models: &[ModelArg],
    strategy: StrategyArg,
    seed: u64,
    fit: OptimizerConfig,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let truth = simulator::generate_truth(&truth_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut flags: Vec<ModelKind> = models.iter().map(|&m| m.into()).collect();
    flags.dedup();
    let cfg = ExperimentConfig {
        rounds,
        dim: truth_cfg.dim,
        flags,
        strategy: SelectionStrategy::new(strategy.into()),
        fit,
        seed,
        ..ExperimentConfig::default()
    };
    let result = simulator::run_experiment(&truth, &cfg)?;
    store::write_dataset(out.join("dataset.jsonl"), truth.dataset.records())?;
    write(&out.join("curve.csv"), curve_to_csv(&result.curves()))?;
    for run in &result.runs {
        let tag = run.flag.tag();
        store::write_observations(out.join(format!("observations-{tag}.jsonl")), &run.observations)?;
        if let Some(model) = &run.model {
            let used = optimizer::training_observations(&run.observations, fit.include_test).len();
            store::save_checkpoint(out.join(format!("checkpoint-{tag}.json")), &Checkpoint::from_model(model, &truth.dataset, fit, used))?;
        }
        let last = run.curve.last();
        println!(
            "{tag}: {} accepted / {} rejected batches, final accuracy {}, log loss {}",
            run.accepted_batches,
            run.rejected_batches,
            last.map_or("n/a".into(), |p| format!("{:.4}", p.accuracy)),
            last.map_or("n/a".into(), |p| format!("{:.4}", p.log_loss)),
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn train(dataset: &Path, observations: &Path, kind: ModelKind, dim: usize, cfg: OptimizerConfig, out: &Path) -> Result<()> {
    let ds = store::load_dataset(dataset)?;
    let obs = store::read_observations(observations)?;
    let fitted = optimizer::fit(&obs, &ds, dim, kind, &cfg, &PriorConfig::default())?;
    let used = optimizer::training_observations(&obs, cfg.include_test).len();
    store::save_checkpoint(out, &Checkpoint::from_model(&fitted.model, &ds, cfg, used))?;
    println!(
        "{kind}: {used} answers, loss {:.6} after {} iterations (restart {}), wrote {}",
        fitted.loss.total,
        fitted.iterations,
        fitted.best_restart,
        out.display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, test: &Path, mode: PredictionMode) -> Result<()> {
    let cp = store::load_checkpoint(checkpoint)?;
    let model = cp.to_model()?;
    let index = cp.object_index()?;
    let obs = store::read_observations(test)?;
    let accuracy = test_accuracy(&model, &index, &obs, mode)?;
    let log_loss = comparable_log_loss_for(&model, &index, &obs, mode)?;
    println!("accuracy {accuracy:.6}");
    println!("log_loss {log_loss:.6}");
    Ok(())
}

fn gradcheck(seed: u64, points: usize) -> Result<()> {
    let report = simulator::gradcheck_suite(points, seed)?;
    println!(
        "{} points, {} coordinates: max gradient rel err {:.3e} (tol {GRAD_REL_TOL:e}), max Hessian-diagonal rel err {:.3e} (tol {HESS_REL_TOL:e})",
        report.points, report.coordinates, report.max_grad_rel_err, report.max_hess_rel_err
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Check("derivative check failed".into()))
    }
}

fn serve(config: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => ServiceConfig::from_file(p)?,
        None => ServiceConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("tokio runtime")))?;
    println!("listening on {}", cfg.listen);
    runtime.block_on(triadic_service::serve(cfg))?;
    Ok(())
}

fn export_embedding(checkpoint: &Path, out: &Path, dataset: Option<&Path>) -> Result<()> {
    let cp = store::load_checkpoint(checkpoint)?;
    let ds = dataset.map(store::load_dataset).transpose()?;
    let mut csv = String::from("id");
    if ds.is_some() {
        csv.push_str(",name,cluster");
    }
    for d in 1..=cp.dim {
        let _ = write!(csv, ",x{d}");
    }
    csv.push('\n');
    for (i, id) in cp.object_ids.iter().enumerate() {
        csv.push_str(id);
        if let Some(ds) = &ds {
            let r = ds.record(ds.index_of(id)?);
            let _ = write!(csv, ",{},{}", r.name.replace(',', " "), r.cluster);
        }
        for v in &cp.coords[i * cp.dim..(i + 1) * cp.dim] {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }
    write(out, csv)?;
    println!("{} objects x {} dims written to {}", cp.object_ids.len(), cp.dim, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { dataset } => validate(&dataset),
        Command::Simulate {
            objects,
            dim,
            users,
            clusters,
            rounds,
            models,
            strategy,
            distance_scale,
            user_spread,
            seed,
            out,
            fit,
        } => {
            let truth = TruthConfig { objects, dim, users, clusters, user_spread, distance_scale, ..TruthConfig::default() };
            simulate(truth, rounds, &models, strategy, seed, fit.config(seed), &out)
        }
        Command::Train { dataset, observations, model, dim, seed, include_test, out, fit } => {
            let cfg = OptimizerConfig { include_test, ..fit.config(seed) };
            train(&dataset, &observations, model.into(), dim, cfg, &out)
        }
        Command::Eval { checkpoint, test_observations, mode } => eval(&checkpoint, &test_observations, mode.into()),
        Command::Gradcheck { seed, points } => gradcheck(seed, points),
        Command::Serve { config } => serve(config.as_deref()),
        Command::ExportEmbedding { checkpoint, out, dataset } => export_embedding(&checkpoint, &out, dataset.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
