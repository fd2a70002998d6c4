use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use credit::data::{load_mnist, MnistFiles, MNIST_DIR_ENV};
use credit::sweep::{self, default_grid};
use credit::trainer::{train_run_observed, TrainConfig};
use credit::{checkpoint, Activation, Family, NetworkSpec, Rule, Splits64};

#[derive(Parser)]
#[command(name = "credit", version, about = "Train and sweep BP/FA/DTP on plain and dense networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write run.json plus a best-checkpoint file.
    Train(TrainArgs),
    /// Run a hyperparameter grid and write manifest, results and curves.
    Sweep(SweepArgs),
    /// Convert a sweep result.json into the two curve CSVs.
    Emit(EmitArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding the four MNIST IDX files (raw or .gz).
    #[arg(long, env = MNIST_DIR_ENV, default_value = "data/mnist")]
    data: PathBuf,
    #[arg(long, default_value = "train-images-idx3-ubyte")]
    train_images: String,
    #[arg(long, default_value = "train-labels-idx1-ubyte")]
    train_labels: String,
    #[arg(long, default_value = "t10k-images-idx3-ubyte")]
    test_images: String,
    #[arg(long, default_value = "t10k-labels-idx1-ubyte")]
    test_labels: String,
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<Splits64> {
        let files = MnistFiles {
            train_images: self.train_images.clone(),
            train_labels: self.train_labels.clone(),
            test_images: self.test_images.clone(),
            test_labels: self.test_labels.clone(),
        };
        load_mnist(&self.data, &files).with_context(|| format!("loading MNIST from {}", self.data.display()))
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TrainConfig JSON; when given, the architecture and optimizer flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "bp")]
    rule: Rule,
    #[arg(long, default_value = "mlp")]
    family: Family,
    #[arg(long)]
    dense: bool,
    #[arg(long, default_value = "sigmoid")]
    activation: Activation,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long)]
    decoder_lr: Option<f64>,
    #[arg(long, default_value_t = 20_000)]
    max_iterations: usize,
    /// Defaults to max-iterations (no early stop).
    #[arg(long)]
    early_stop: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    eval_interval: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    target_step: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "out/train")]
    out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> anyhow::Result<TrainConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            return Ok(serde_json::from_slice(&text)?);
        }
        let mut network = NetworkSpec::mnist(self.family, self.dense, self.depth, self.activation);
        network.init_seed = self.seed;
        let mut c = TrainConfig::new(
            self.rule,
            network,
            self.lr,
            self.max_iterations,
            self.early_stop.unwrap_or(self.max_iterations),
        );
        c.decoder_learning_rate = self.decoder_lr;
        c.eval_interval = self.eval_interval;
        c.patience = self.patience;
        c.batch_size = self.batch_size;
        c.weight_decay = self.weight_decay;
        c.seed = self.seed;
        c.target_step = self.target_step;
        c.noise_std = self.noise_std;
        Ok(c)
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| anyhow::anyhow!("'{x}': {e}")))
        .collect()
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    rule: Rule,
    #[arg(long, default_value = "mlp")]
    family: Family,
    #[arg(long)]
    dense: bool,
    #[arg(long, default_value = "sigmoid")]
    activation: Activation,
    /// Multiplies every iteration count of the grid, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    base_seed: u64,
    /// Comma-separated override of the grid's depths.
    #[arg(long)]
    depths: Option<String>,
    /// Comma-separated override of the grid's learning rates.
    #[arg(long)]
    learning_rates: Option<String>,
    /// Comma-separated override of the grid's early-stop points (full-scale iterations).
    #[arg(long)]
    early_stops: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmitArgs {
    /// A result.json written by `sweep`.
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let config = args.config()?;
    config.validate()?;
    let data = args.data.load()?;
    let outcome = train_run_observed(&config, &data, |p, _| {
        let loss = p.train_loss.map_or_else(|| "-".to_string(), |l| format!("{l:.4}"));
        eprintln!("iter {:>8}  loss {loss:>8}  val {:.4}", p.iteration, p.val_accuracy);
    })?;
    std::fs::create_dir_all(&args.out)?;
    let r = &outcome.record;
    std::fs::write(args.out.join("run.json"), serde_json::to_vec_pretty(r)?)?;
    checkpoint::save(
        &args.out.join("best.ckpt"),
        &outcome.best_params,
        serde_json::json!({ "iteration": r.best_iteration, "network": config.network }),
    )?;
    println!(
        "best val {:.4} at iteration {}; test {:.4}; stopped at {}{}",
        r.best_val_accuracy,
        r.best_iteration,
        r.test_accuracy,
        r.stopped_at,
        if r.diverged { " (diverged)" } else { "" }
    );
    Ok(())
}

fn run_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let mut grid = default_grid(args.rule, args.family, args.dense, args.activation)?;
    grid.folds = args.folds;
    grid.base_seed = args.base_seed;
    if let Some(s) = &args.depths {
        grid.depths = parse_list(s)?;
    }
    if let Some(s) = &args.learning_rates {
        grid.learning_rates = parse_list(s)?;
    }
    if let Some(s) = &args.early_stops {
        grid.early_stops = parse_list(s)?;
    }
    grid.validate()?;
    if !(args.scale > 0.0 && args.scale <= 1.0) {
        bail!("--scale must be in (0, 1], got {}", args.scale);
    }
    sweep::write_manifest(&args.out, &sweep::manifest(&grid, args.scale))?;
    let data = args.data.load()?;
    let result = sweep::run_sweep(&grid, &data, args.scale, args.workers, Some(&args.out.join("runs")))?;
    sweep::write_result(&args.out, &result)?;
    report_failures(&result);
    if result.selection.is_empty() {
        bail!("every configuration failed; see {}", args.out.join(sweep::RESULT_FILE).display());
    }
    sweep::write_curves(&args.out, &result)?;
    for s in &result.selection {
        println!(
            "depth {:>2}: lr {:e}, early stop {:>7}: test {:.4} ± {:.4}",
            s.point.depth, s.point.learning_rate, s.point.early_stop, s.mean_test_accuracy, s.std_test_accuracy
        );
    }
    Ok(())
}

fn report_failures(result: &sweep::SweepResult) {
    for r in &result.runs {
        if let Some(e) = &r.error {
            eprintln!(
                "run depth {} lr {:e} es {} fold {} failed: {e}",
                r.point.depth, r.point.learning_rate, r.point.early_stop, r.fold
            );
        }
    }
}

fn emit(result: &Path, out: &Path) -> anyhow::Result<()> {
    let r = sweep::read_result(result).with_context(|| format!("reading {}", result.display()))?;
    sweep::write_curves(out, &r)?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Train(a) => train(&a),
        Command::Sweep(a) => run_sweep(&a),
        Command::Emit(a) => emit(&a.result, &a.out),
    }
}
