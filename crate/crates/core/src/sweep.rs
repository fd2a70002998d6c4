//! Hyperparameter grids, parallel sweeps, per-depth selection and CSV output.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::network::{Family, NetworkSpec};
use crate::rules::Rule;
use crate::scalar::Scalar;
use crate::trainer::{train_run, RunRecord, TrainConfig};

fn default_stop_window() -> usize {
    100_000
}
fn default_eval_interval() -> usize {
    1000
}
fn default_patience() -> usize {
    10
}

/// One rule/architecture cell of the search space. Iteration counts are at
/// full scale; [`run_sweep`] multiplies them by `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rule: Rule,
    pub family: Family,
    pub dense: bool,
    pub activation: Activation,
    pub depths: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub early_stops: Vec<usize>,
    pub folds: usize,
    pub base_seed: u64,
    /// Iterations allowed past the early-stop point: `max_iterations =
    /// early_stop + stop_window`.
    #[serde(default = "default_stop_window")]
    pub stop_window: usize,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

/// One (depth, learning rate, early stop) combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub depth: usize,
    pub learning_rate: f64,
    pub early_stop: usize,
}

impl GridPoint {
    /// Lexicographic order on `(depth, learning_rate, early_stop)`.
    pub fn cmp_key(&self, other: &Self) -> Ordering {
        self.depth
            .cmp(&other.depth)
            .then(self.learning_rate.total_cmp(&other.learning_rate))
            .then(self.early_stop.cmp(&other.early_stop))
    }
}

/// Learning rates of the default grid for a rule and activation.
pub fn default_learning_rates(rule: Rule, activation: Activation) -> Vec<f64> {
    match (rule, activation) {
        (_, Activation::Relu) => vec![1e-3, 1e-4, 1e-5],
        (Rule::Bp, _) => vec![0.1, 0.01, 0.001],
        (Rule::Fa | Rule::Dtp, _) => vec![0.01, 0.001, 0.0001],
    }
}

/// Early-stop starting points (iterations) of the default grid.
pub fn default_early_stops(rule: Rule, family: Family) -> Vec<usize> {
    match (family, rule) {
        (Family::Mlp, _) => vec![200_000, 400_000, 600_000, 800_000, 1_000_000],
        (Family::Conv, Rule::Bp) => vec![100_000, 200_000, 300_000],
        (Family::Conv, Rule::Fa) => vec![600_000, 800_000, 1_000_000],
        (Family::Conv, Rule::Dtp) => vec![50_000, 100_000, 150_000],
    }
}

pub fn default_depths(activation: Activation) -> Vec<usize> {
    match activation {
        Activation::Relu => (5..=10).collect(),
        _ => (3..=7).collect(),
    }
}

pub const DEFAULT_FOLDS: usize = 10;

pub fn default_grid(rule: Rule, family: Family, dense: bool, activation: Activation) -> Result<GridSpec> {
    if !matches!(activation, Activation::Sigmoid | Activation::Relu) {
        return Err(Error::InvalidConfig(format!(
            "hidden activation must be sigmoid or relu, got {activation}"
        )));
    }
    Ok(GridSpec {
        rule,
        family,
        dense,
        activation,
        depths: default_depths(activation),
        learning_rates: default_learning_rates(rule, activation),
        early_stops: default_early_stops(rule, family),
        folds: DEFAULT_FOLDS,
        base_seed: 0,
        stop_window: default_stop_window(),
        eval_interval: default_eval_interval(),
        patience: default_patience(),
    })
}

/// `max(1, round(n * scale))`.
pub fn scale_iterations(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.learning_rates.is_empty() || self.early_stops.is_empty() {
            return Err(Error::InvalidConfig("grid lists must be non-empty".into()));
        }
        if self.folds == 0 {
            return Err(Error::InvalidConfig("folds must be at least 1".into()));
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// All grid points in lexicographic order, duplicates removed.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &depth in &self.depths {
            for &learning_rate in &self.learning_rates {
                for &early_stop in &self.early_stops {
                    out.push(GridPoint {
                        depth,
                        learning_rate,
                        early_stop,
                    });
                }
            }
        }
        out.sort_by(|a, b| a.cmp_key(b));
        out.dedup_by(|a, b| a.cmp_key(b) == Ordering::Equal);
        out
    }

    pub fn fold_seed(&self, fold: usize) -> u64 {
        self.base_seed.wrapping_add(fold as u64)
    }

    /// The training configuration of one grid point and fold at `scale`.
    pub fn train_config(&self, point: &GridPoint, fold: usize, scale: f64) -> TrainConfig {
        let seed = self.fold_seed(fold);
        let mut network = NetworkSpec::mnist(self.family, self.dense, point.depth, self.activation);
        network.init_seed = seed;
        let early_stop = scale_iterations(point.early_stop, scale);
        let mut config = TrainConfig::new(
            self.rule,
            network,
            point.learning_rate,
            early_stop + scale_iterations(self.stop_window, scale),
            early_stop,
        );
        config.eval_interval = scale_iterations(self.eval_interval, scale);
        config.patience = self.patience;
        config.seed = seed;
        config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub point: GridPoint,
    pub fold: usize,
    pub seed: u64,
    pub record: Option<RunRecord>,
    /// Set when the run failed; the record is then absent.
    pub error: Option<String>,
}

/// Fold-aggregated results for one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub point: GridPoint,
    pub mean_val_accuracy: f64,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation (0 for a single fold).
    pub std_test_accuracy: f64,
    pub fold_test_accuracies: Vec<f64>,
    pub failed_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: GridSpec,
    pub scale: f64,
    pub runs: Vec<RunEntry>,
    /// Best configuration per depth, ascending depth.
    pub selection: Vec<ConfigSummary>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Groups runs by grid point (in `cmp_key` order) and averages over folds.
/// A point with any failed fold gets NaN means.
pub fn summarize(runs: &[RunEntry]) -> Vec<ConfigSummary> {
    let mut sorted: Vec<&RunEntry> = runs.iter().collect();
    sorted.sort_by(|a, b| a.point.cmp_key(&b.point).then(a.fold.cmp(&b.fold)));
    let mut out: Vec<ConfigSummary> = Vec::new();
    for group in sorted.chunk_by(|a, b| a.point.cmp_key(&b.point) == Ordering::Equal) {
        let records: Vec<&RunRecord> = group.iter().filter_map(|r| r.record.as_ref()).collect();
        let failed = group.len() - records.len();
        let vals: Vec<f64> = records.iter().map(|r| r.best_val_accuracy).collect();
        let tests: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
        let nan_if_failed = |x: f64| if failed > 0 { f64::NAN } else { x };
        out.push(ConfigSummary {
            point: group[0].point,
            mean_val_accuracy: nan_if_failed(mean(&vals)),
            mean_test_accuracy: nan_if_failed(mean(&tests)),
            std_test_accuracy: nan_if_failed(sample_std(&tests)),
            fold_test_accuracies: tests,
            failed_folds: failed,
        });
    }
    out
}

/// Per depth, the point with the highest mean validation accuracy. Ties go to
/// the lexicographically smallest point; points with failed folds are skipped.
pub fn select(runs: &[RunEntry]) -> Vec<ConfigSummary> {
    let mut best: Vec<ConfigSummary> = Vec::new();
    for s in summarize(runs) {
        if s.mean_val_accuracy.is_nan() {
            continue;
        }
        match best.last_mut() {
            Some(b) if b.point.depth == s.point.depth => {
                // summaries arrive in ascending key order, so strict > keeps the smallest
                if s.mean_val_accuracy > b.mean_val_accuracy {
                    *b = s;
                }
            }
            _ => best.push(s),
        }
    }
    best
}

fn run_file(dir: &Path, point: &GridPoint, fold: usize) -> PathBuf {
    dir.join(format!(
        "d{}_lr{:e}_es{}_f{}.json",
        point.depth, point.learning_rate, point.early_stop, fold
    ))
}

/// Reads a previously stored run if its configuration matches `config`.
fn cached_run(path: &Path, config: &TrainConfig) -> Option<RunEntry> {
    let bytes = std::fs::read(path).ok()?;
    let entry: RunEntry = serde_json::from_slice(&bytes).ok()?;
    (entry.record.as_ref()?.config == *config).then_some(entry)
}

/// Runs every grid point and fold on up to `workers` threads.
///
/// When `run_dir` is given each finished run is stored there as JSON, and a
/// stored run whose configuration matches is reused instead of retrained.
pub fn run_sweep<T: Scalar>(
    grid: &GridSpec,
    data: &Splits<T>,
    scale: f64,
    workers: usize,
    run_dir: Option<&Path>,
) -> Result<SweepResult> {
    grid.validate()?;
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::InvalidConfig(format!("scale must be in (0, 1], got {scale}")));
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let jobs: Vec<(GridPoint, usize)> = grid
        .points()
        .into_iter()
        .flat_map(|p| (0..grid.folds).map(move |f| (p, f)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let runs: Vec<RunEntry> = pool.install(|| {
        jobs.par_iter()
            .map(|&(point, fold)| {
                let config = grid.train_config(&point, fold, scale);
                let path = run_dir.map(|d| run_file(d, &point, fold));
                if let Some(entry) = path.as_deref().and_then(|p| cached_run(p, &config)) {
                    return Ok(entry);
                }
                let (record, error) = match train_run(&config, data) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                let entry = RunEntry {
                    point,
                    fold,
                    seed: config.seed,
                    record,
                    error,
                };
                if let (Some(p), Some(_)) = (&path, &entry.record) {
                    std::fs::write(p, serde_json::to_vec_pretty(&entry)?)?;
                }
                Ok(entry)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let selection = select(&runs);
    Ok(SweepResult {
        grid: grid.clone(),
        scale,
        runs,
        selection,
    })
}

/// Exact description of a sweep's work, without results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub grid: GridSpec,
    pub scale: f64,
    pub runs: Vec<ManifestRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub point: GridPoint,
    pub fold: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub early_stop_start: usize,
    pub eval_interval: usize,
}

pub fn manifest(grid: &GridSpec, scale: f64) -> Manifest {
    let mut runs = Vec::new();
    for point in grid.points() {
        for fold in 0..grid.folds {
            let c = grid.train_config(&point, fold, scale);
            runs.push(ManifestRun {
                point,
                fold,
                seed: c.seed,
                max_iterations: c.max_iterations,
                early_stop_start: c.early_stop_start,
                eval_interval: c.eval_interval,
            });
        }
    }
    Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        grid: grid.clone(),
        scale,
        runs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub rule: Rule,
    pub family: Family,
    pub dense: bool,
    pub activation: Activation,
    pub depth: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub learning_rate: f64,
    pub early_stop: usize,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub rank: usize,
    pub rule: Rule,
    pub family: Family,
    pub dense: bool,
    pub activation: Activation,
    pub depth: usize,
    pub learning_rate: f64,
    pub early_stop: usize,
    pub mean_test_acc: f64,
}

pub fn depth_rows(result: &SweepResult) -> Result<Vec<DepthRow>> {
    if result.selection.is_empty() {
        return Err(Error::InvalidConfig("sweep has no successful configuration".into()));
    }
    let g = &result.grid;
    Ok(result
        .selection
        .iter()
        .map(|s| DepthRow {
            rule: g.rule,
            family: g.family,
            dense: g.dense,
            activation: g.activation,
            depth: s.point.depth,
            mean_test_acc: s.mean_test_accuracy,
            std_test_acc: s.std_test_accuracy,
            learning_rate: s.point.learning_rate,
            early_stop: s.point.early_stop,
            folds: s.fold_test_accuracies.len(),
        })
        .collect())
}

/// Every grid point ranked by mean test accuracy, best first; points with a
/// failed fold (NaN) rank last.
pub fn robustness_rows(result: &SweepResult) -> Vec<RobustnessRow> {
    let mut summaries = summarize(&result.runs);
    summaries.sort_by(|a, b| {
        let (x, y) = (a.mean_test_accuracy, b.mean_test_accuracy);
        match (x.is_nan(), y.is_nan()) {
            (false, false) => y.total_cmp(&x),
            (a_nan, b_nan) => a_nan.cmp(&b_nan),
        }
        .then(a.point.cmp_key(&b.point))
    });
    let g = &result.grid;
    summaries
        .into_iter()
        .enumerate()
        .map(|(rank, s)| RobustnessRow {
            rank,
            rule: g.rule,
            family: g.family,
            dense: g.dense,
            activation: g.activation,
            depth: s.point.depth,
            learning_rate: s.point.learning_rate,
            early_stop: s.point.early_stop,
            mean_test_acc: s.mean_test_accuracy,
        })
        .collect()
}

fn write_csv<R: Serialize, W: std::io::Write>(rows: &[R], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_depth_curve<W: std::io::Write>(result: &SweepResult, out: W) -> Result<()> {
    write_csv(&depth_rows(result)?, out)
}

pub fn emit_robustness_curve<W: std::io::Write>(result: &SweepResult, out: W) -> Result<()> {
    write_csv(&robustness_rows(result), out)
}

pub fn read_csv<R: serde::de::DeserializeOwned>(input: impl std::io::Read) -> Result<Vec<R>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULT_FILE: &str = "result.json";
pub const DEPTH_CSV: &str = "depth_curve.csv";
pub const ROBUSTNESS_CSV: &str = "robustness_curve.csv";

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

pub fn write_result(dir: &Path, result: &SweepResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESULT_FILE), serde_json::to_vec_pretty(result)?)?;
    Ok(())
}

pub fn read_result(path: &Path) -> Result<SweepResult> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Writes both CSVs for `result` into `dir`.
pub fn write_curves(dir: &Path, result: &SweepResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    emit_depth_curve(result, std::fs::File::create(dir.join(DEPTH_CSV))?)?;
    emit_robustness_curve(result, std::fs::File::create(dir.join(ROBUSTNESS_CSV))?)?;
    Ok(())
}
