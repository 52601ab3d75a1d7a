//! Library side of the `pathnet` binary: run configuration, experiment
//! sweeps, aggregate statistics, checkpoint inspection and data checks.
//!
//! Every subcommand is a plain function returning a report, so the binary
//! only parses flags, prints and maps errors to exit codes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::async_evolution::AsyncParams;
use crate::error::{Error, Result};
use crate::evolution::EvolutionParams;
use crate::experiment::{run_experiment, write_run, Arm, Engine, ExperimentPlan, RunSummary};
use crate::pathnet::{NetConfig, ParameterGrid};
use crate::tasks::{
    make_binary_task, make_synthetic, MnistData, SyntheticKind, TaskSpec, DEFAULT_STOP_THRESHOLD,
    MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS,
};

/// Overrides the MNIST directory from the config file.
pub const DATA_DIR_ENV: &str = "PATHNET_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";
pub const CHECKSUM_FILE: &str = "SHA256SUMS";
pub const STATS_SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Maps an error to the process exit status.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Input(_) => EXIT_USAGE,
        Error::Data(_) | Error::Format { .. } | Error::Schema { .. } | Error::Io(_) | Error::Json(_) => {
            EXIT_DATA
        }
        Error::Dimension { .. } | Error::State(_) | Error::WorkerPanic { .. } => EXIT_INTERNAL,
    }
}

fn default_arm() -> Arm {
    Arm::Pathnet
}
fn default_seed() -> u64 {
    1
}
fn default_replicas() -> usize {
    1
}
fn default_max_generations() -> u64 {
    crate::experiment::DEFAULT_MAX_GENERATIONS
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_noise() -> f64 {
    0.5
}

/// A task as written in the config file or on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    Mnist {
        digits: [u8; 2],
        #[serde(default = "default_noise")]
        noise_prob: f64,
        #[serde(default)]
        stop_threshold: Option<f64>,
        #[serde(default)]
        seed: u64,
    },
    Synthetic {
        kind: SyntheticName,
        dim: usize,
        /// Parity width; only for `kind = "parity"`.
        #[serde(default)]
        k: Option<usize>,
        #[serde(default)]
        stop_threshold: Option<f64>,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticName {
    Linear,
    Xor,
    Parity,
}

impl TaskConfig {
    pub fn is_mnist(&self) -> bool {
        matches!(self, TaskConfig::Mnist { .. })
    }

    pub fn set_threshold(&mut self, t: f64) {
        match self {
            TaskConfig::Mnist { stop_threshold, .. } | TaskConfig::Synthetic { stop_threshold, .. } => {
                *stop_threshold = Some(t)
            }
        }
    }

    /// Builds the task; `mnist` must be loaded for MNIST tasks.
    pub fn build(&self, mnist: Option<&Arc<MnistData>>, field: &str) -> Result<TaskSpec> {
        let config_err = |e: Error| Error::Config {
            path: field.to_string(),
            reason: e.to_string(),
        };
        let (task, threshold) = match self {
            TaskConfig::Mnist {
                digits,
                noise_prob,
                stop_threshold,
                seed,
            } => {
                let data = mnist.ok_or_else(|| Error::State("MNIST data not loaded".into()))?;
                let t = make_binary_task(data, (digits[0], digits[1]), *noise_prob, *seed).map_err(config_err)?;
                (t, stop_threshold)
            }
            TaskConfig::Synthetic {
                kind,
                dim,
                k,
                stop_threshold,
                seed,
            } => {
                let kind = match (kind, k) {
                    (SyntheticName::Linear, None) => SyntheticKind::LinearlySeparable,
                    (SyntheticName::Xor, None) => SyntheticKind::Xor,
                    (SyntheticName::Parity, Some(k)) => SyntheticKind::Parity { k: *k },
                    (SyntheticName::Parity, None) => {
                        return Err(Error::Config {
                            path: format!("{field}.k"),
                            reason: "parity tasks need a width `k`".into(),
                        })
                    }
                    (_, Some(_)) => {
                        return Err(Error::Config {
                            path: format!("{field}.k"),
                            reason: "`k` only applies to parity tasks".into(),
                        })
                    }
                };
                (make_synthetic(kind, *dim, *seed).map_err(config_err)?, stop_threshold)
            }
        };
        let t = threshold.unwrap_or(DEFAULT_STOP_THRESHOLD);
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config {
                path: format!("{field}.stop_threshold"),
                reason: format!("{t} is not in (0, 1]"),
            });
        }
        Ok(task.with_threshold(t))
    }
}

/// Short form: `mnist:5v6`, `mnist:5v6:0.3` (noise), `synthetic:xor:2`,
/// `synthetic:linear:10`, `synthetic:parity3:8`.
impl FromStr for TaskConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Input(format!("cannot parse task `{s}` (try mnist:5v6 or synthetic:xor:2)"));
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["mnist", pair, rest @ ..] if rest.len() <= 1 => {
                let (a, b) = pair.split_once('v').ok_or_else(bad)?;
                let noise_prob = match rest {
                    [n] => n.parse().map_err(|_| bad())?,
                    _ => default_noise(),
                };
                Ok(TaskConfig::Mnist {
                    digits: [a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?],
                    noise_prob,
                    stop_threshold: None,
                    seed: 0,
                })
            }
            ["synthetic", kind, dim] => {
                let dim = dim.parse().map_err(|_| bad())?;
                let (kind, k) = match *kind {
                    "linear" => (SyntheticName::Linear, None),
                    "xor" => (SyntheticName::Xor, None),
                    p if p.starts_with("parity") => {
                        (SyntheticName::Parity, Some(p["parity".len()..].parse().map_err(|_| bad())?))
                    }
                    _ => return Err(bad()),
                };
                Ok(TaskConfig::Synthetic {
                    kind,
                    dim,
                    k,
                    stop_threshold: None,
                    seed: 0,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Everything needed to run one or more experiment replicas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_arm")]
    pub arm: Arm,
    #[serde(default)]
    pub engine: Engine,
    /// Seed of the first replica; replica `i` uses `seed + i`.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Async engine only: number of workers (one per population slot).
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "default_max_generations")]
    pub max_generations: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Also write the final parameter grid next to each summary.
    #[serde(default)]
    pub checkpoint: bool,
    #[serde(default = "NetConfig::mnist")]
    pub net: NetConfig,
    #[serde(default)]
    pub evo: EvolutionParams,
    #[serde(default, rename = "async")]
    pub asyn: AsyncParams,
    pub task_a: TaskConfig,
    pub task_b: TaskConfig,
}

impl RunConfig {
    pub fn new(task_a: TaskConfig, task_b: TaskConfig) -> Self {
        RunConfig {
            arm: default_arm(),
            engine: Engine::Serial,
            seed: default_seed(),
            replicas: default_replicas(),
            workers: None,
            max_generations: default_max_generations(),
            output_dir: default_output_dir(),
            data_dir: None,
            checkpoint: false,
            net: NetConfig::mnist(),
            evo: EvolutionParams::default(),
            asyn: AsyncParams::default(),
            task_a,
            task_b,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            path: toml_error_path(&e, text),
            reason: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    /// Sets the stop threshold of both tasks.
    pub fn set_threshold(&mut self, t: f64) {
        self.task_a.set_threshold(t);
        self.task_b.set_threshold(t);
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let cfg = |path: &str, reason: String| Error::Config {
            path: path.into(),
            reason,
        };
        if self.replicas == 0 {
            return Err(cfg("replicas", "must be at least 1".into()));
        }
        if self.max_generations == 0 {
            return Err(cfg("max_generations", "must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(cfg("workers", "must be at least 1".into()));
        }
        self.net.validate().map_err(|e| cfg("net", e.to_string()))?;
        self.evo.validate().map_err(|e| cfg("evo", e.to_string()))?;
        if self.asyn.rounds_per_evaluation == 0 {
            return Err(cfg("async.rounds_per_evaluation", "must be at least 1".into()));
        }
        Ok(())
    }

    /// Directory holding the MNIST IDX files: the environment variable
    /// wins over the config file, which wins over the default.
    pub fn resolved_data_dir(&self) -> PathBuf {
        resolve_data_dir(self.data_dir.as_deref())
    }

    /// Builds the plan for replica `index`.
    pub fn plan(&self, index: usize, mnist: Option<&Arc<MnistData>>) -> Result<ExperimentPlan> {
        let task_a = self.task_a.build(mnist, "task_a")?;
        let task_b = self.task_b.build(mnist, "task_b")?;
        let mut evo = self.evo.clone();
        if let (Engine::Async, Some(w)) = (self.engine, self.workers) {
            evo.population = w;
        }
        let plan = ExperimentPlan {
            arm: self.arm,
            engine: self.engine,
            task_a,
            task_b,
            net: self.net.clone(),
            evo,
            asyn: self.asyn.clone(),
            seed: self.seed + index as u64,
            max_generations: self.max_generations,
        };
        plan.validate().map_err(|e| match e {
            e @ Error::Config { .. } => e,
            other => Error::Config {
                path: "plan".into(),
                reason: other.to_string(),
            },
        })?;
        Ok(plan)
    }
}

fn toml_error_path(e: &toml::de::Error, text: &str) -> String {
    // toml reports a byte span; name the line so the field can be found.
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let snippet = text.lines().nth(line - 1).unwrap_or("").trim();
            format!("line {line}: {snippet}")
        }
        None => "<config>".into(),
    }
}

pub fn resolve_data_dir(configured: Option<&Path>) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
    }
}

/// One finished replica.
#[derive(Clone, Debug)]
pub struct ReplicaResult {
    pub seed: u64,
    pub summary_path: PathBuf,
    pub records_path: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    pub summary: RunSummary,
}

impl fmt::Display for ReplicaResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.summary.outcome;
        write!(
            f,
            "{} seed {}: task A {} gens ({}), task B {} gens ({}), total {}",
            self.summary.plan.arm,
            self.seed,
            o.gens_task_a,
            if o.converged_a { "converged" } else { "budget" },
            o.gens_task_b,
            if o.converged_b { "converged" } else { "budget" },
            o.total
        )?;
        if let Some(ov) = o.overlap_count {
            write!(f, ", overlap {ov}")?;
        }
        write!(f, " -> {}", self.summary_path.display())
    }
}

/// Runs every replica of `config`, writing summaries and record streams to
/// its output directory.
pub fn cmd_run(config: &RunConfig) -> Result<Vec<ReplicaResult>> {
    config.validate()?;
    let mnist = if config.task_a.is_mnist() || config.task_b.is_mnist() {
        Some(Arc::new(MnistData::load_dir(&config.resolved_data_dir())?))
    } else {
        None
    };
    let mut results = Vec::with_capacity(config.replicas);
    for i in 0..config.replicas {
        let plan = config.plan(i, mnist.as_ref())?;
        let outcome = run_experiment(&plan)?;
        let (summary_path, records_path) = write_run(&config.output_dir, &plan, &outcome)?;
        let checkpoint_path = if config.checkpoint {
            let p = config.output_dir.join(format!("{}.ckpt", plan.file_stem()));
            outcome.grid.save(&p)?;
            Some(p)
        } else {
            None
        };
        results.push(ReplicaResult {
            seed: plan.seed,
            summary_path,
            records_path,
            checkpoint_path,
            summary: RunSummary::new(&plan, &outcome),
        });
    }
    Ok(results)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Two-sided 95% Student-t interval for the mean; needs two samples.
pub fn ci95(xs: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).ok()?.inverse_cdf(0.975);
    let half = t * (var / n as f64).sqrt();
    Some((m - half, m + half))
}

/// Sample Pearson correlation; `None` with fewer than two points or zero
/// variance in either coordinate.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs)?, mean(ys)?);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Per-arm aggregate over converged runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub arm: Arm,
    pub runs: usize,
    pub converged: usize,
    pub mean_total: Option<f64>,
    pub median_total: Option<f64>,
    pub ci95_total: Option<(f64, f64)>,
    pub mean_gens_task_a: Option<f64>,
    pub mean_gens_task_b: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub control: Arm,
    /// `mean(control) / mean(pathnet)`.
    pub ratio_of_means: Option<f64>,
    /// Mean over runs sharing seed and task pair of `control / pathnet`.
    pub mean_paired_ratio: Option<f64>,
    pub pairs: usize,
}

/// One PathNet run in the overlap-versus-speedup scatter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub seed: u64,
    pub task_a: String,
    pub task_b: String,
    pub overlap_count: usize,
    pub converged: bool,
    pub speedup_vs_independent: Option<f64>,
    pub speedup_vs_finetune: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub schema_version: u32,
    pub arms: Vec<ArmStats>,
    pub speedups: Vec<Speedup>,
    pub scatter: Vec<ScatterPoint>,
    /// Correlation of overlap with speedup against the independent control.
    pub overlap_speedup_pearson: Option<f64>,
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
        writeln!(f, "{:<12} {:>5} {:>9} {:>9} {:>9}  95% CI", "arm", "runs", "converged", "mean", "median")?;
        for a in &self.arms {
            let ci = a.ci95_total.map_or("-".to_string(), |(lo, hi)| format!("[{lo:.1}, {hi:.1}]"));
            writeln!(
                f,
                "{:<12} {:>5} {:>9} {:>9} {:>9}  {}",
                a.arm.to_string(),
                a.runs,
                a.converged,
                opt(a.mean_total),
                opt(a.median_total),
                ci
            )?;
        }
        for s in &self.speedups {
            writeln!(
                f,
                "speedup vs {}: ratio of means {}, mean paired ratio {} ({} pairs)",
                s.control,
                opt(s.ratio_of_means),
                opt(s.mean_paired_ratio),
                s.pairs
            )?;
        }
        write!(
            f,
            "overlap points: {}, pearson r (overlap, speedup): {}",
            self.scatter.len(),
            opt(self.overlap_speedup_pearson)
        )
    }
}

/// Loads every `*.json` run summary directly inside `dir`.
pub fn load_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let summaries = paths.iter().map(|p| RunSummary::load(p)).collect::<Result<Vec<_>>>()?;
    if summaries.is_empty() {
        return Err(Error::Data(format!("no run summaries in {}", dir.display())));
    }
    Ok(summaries)
}

pub fn aggregate(summaries: &[RunSummary]) -> StatsReport {
    let mut by_arm: BTreeMap<Arm, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        by_arm.entry(s.plan.arm).or_default().push(s);
    }
    let arms: Vec<ArmStats> = by_arm
        .iter()
        .map(|(&arm, runs)| {
            let conv: Vec<&&RunSummary> = runs.iter().filter(|s| s.converged()).collect();
            let totals: Vec<f64> = conv.iter().map(|s| s.outcome.total as f64).collect();
            let ga: Vec<f64> = conv.iter().map(|s| s.outcome.gens_task_a as f64).collect();
            let gb: Vec<f64> = conv.iter().map(|s| s.outcome.gens_task_b as f64).collect();
            ArmStats {
                arm,
                runs: runs.len(),
                converged: conv.len(),
                mean_total: mean(&totals),
                median_total: median(&totals),
                ci95_total: ci95(&totals),
                mean_gens_task_a: mean(&ga),
                mean_gens_task_b: mean(&gb),
            }
        })
        .collect();

    let key = |s: &RunSummary| (s.plan.seed, s.plan.task_a.clone(), s.plan.task_b.clone());
    let converged_totals = |arm: Arm| -> BTreeMap<(u64, String, String), f64> {
        by_arm
            .get(&arm)
            .into_iter()
            .flatten()
            .filter(|s| s.converged())
            .map(|s| (key(s), s.outcome.total as f64))
            .collect()
    };
    let pathnet = converged_totals(Arm::Pathnet);
    let mean_of = |arm: Arm| arms.iter().find(|a| a.arm == arm).and_then(|a| a.mean_total);

    let mut speedups = Vec::new();
    let mut paired: BTreeMap<Arm, BTreeMap<(u64, String, String), f64>> = BTreeMap::new();
    for control in [Arm::Independent, Arm::Finetune] {
        if !by_arm.contains_key(&control) || !by_arm.contains_key(&Arm::Pathnet) {
            continue;
        }
        let ctrl = converged_totals(control);
        let ratios: BTreeMap<_, f64> = ctrl
            .iter()
            .filter_map(|(k, c)| pathnet.get(k).map(|p| (k.clone(), c / p)))
            .collect();
        let values: Vec<f64> = ratios.values().copied().collect();
        speedups.push(Speedup {
            control,
            ratio_of_means: mean_of(control).zip(mean_of(Arm::Pathnet)).map(|(c, p)| c / p),
            mean_paired_ratio: mean(&values),
            pairs: values.len(),
        });
        paired.insert(control, ratios);
    }

    let scatter: Vec<ScatterPoint> = by_arm
        .get(&Arm::Pathnet)
        .into_iter()
        .flatten()
        .filter_map(|s| {
            let k = key(s);
            Some(ScatterPoint {
                seed: s.plan.seed,
                task_a: s.plan.task_a.clone(),
                task_b: s.plan.task_b.clone(),
                overlap_count: s.outcome.overlap_count?,
                converged: s.converged(),
                speedup_vs_independent: paired.get(&Arm::Independent).and_then(|m| m.get(&k).copied()),
                speedup_vs_finetune: paired.get(&Arm::Finetune).and_then(|m| m.get(&k).copied()),
            })
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = scatter
        .iter()
        .filter_map(|p| p.speedup_vs_independent.map(|s| (p.overlap_count as f64, s)))
        .unzip();

    StatsReport {
        schema_version: STATS_SCHEMA_VERSION,
        arms,
        speedups,
        overlap_speedup_pearson: pearson(&xs, &ys),
        scatter,
    }
}

/// Where [`cmd_stats`] wrote its tables.
#[derive(Clone, Debug)]
pub struct StatsOutput {
    pub report: StatsReport,
    pub report_path: PathBuf,
    pub scatter_path: PathBuf,
}

/// Aggregates the summaries in `dir` and writes `stats/report.json` and
/// `stats/overlap_scatter.csv` under it.
pub fn cmd_stats(dir: &Path) -> Result<StatsOutput> {
    let report = aggregate(&load_summaries(dir)?);
    let out = dir.join("stats");
    fs::create_dir_all(&out)?;
    let report_path = out.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    let scatter_path = out.join("overlap_scatter.csv");
    let mut w = fs::File::create(&scatter_path)?;
    writeln!(w, "seed,task_a,task_b,overlap_count,converged,speedup_vs_independent,speedup_vs_finetune")?;
    let cell = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for p in &report.scatter {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.seed,
            p.task_a,
            p.task_b,
            p.overlap_count,
            p.converged,
            cell(p.speedup_vs_independent),
            cell(p.speedup_vs_finetune)
        )?;
    }
    Ok(StatsOutput {
        report,
        report_path,
        scatter_path,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspectReport {
    pub config: NetConfig,
    pub frozen_per_layer: Vec<usize>,
    pub frozen_total: usize,
    pub heads: Vec<(String, usize)>,
    pub always_active: bool,
}

impl InspectReport {
    pub fn of(grid: &ParameterGrid) -> Self {
        InspectReport {
            config: grid.config().clone(),
            frozen_per_layer: grid.frozen_per_layer(),
            frozen_total: grid.frozen_count(),
            heads: grid.heads().iter().map(|(k, h)| (k.clone(), h.classes)).collect(),
            always_active: grid.always_active().is_some(),
        }
    }
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(
            f,
            "grid: {} layers x {} modules, {} neurons each, up to {} active, input {}",
            c.layers, c.modules_per_layer, c.neurons_per_module, c.max_active, c.input_dim
        )?;
        writeln!(f, "frozen: {} of {} modules", self.frozen_total, c.module_count())?;
        for (l, n) in self.frozen_per_layer.iter().enumerate() {
            writeln!(f, "  layer {l}: {n}/{}", c.modules_per_layer)?;
        }
        writeln!(f, "always-active frozen path: {}", if self.always_active { "yes" } else { "no" })?;
        write!(f, "heads:")?;
        if self.heads.is_empty() {
            write!(f, " none")?;
        }
        for (name, classes) in &self.heads {
            write!(f, "\n  {name} ({classes} classes)")?;
        }
        Ok(())
    }
}

pub fn cmd_inspect(checkpoint: &Path) -> Result<InspectReport> {
    Ok(InspectReport::of(&ParameterGrid::load(checkpoint)?))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub enum ChecksumStatus {
    Match,
    /// No checksum list, or the file is not in it.
    Unlisted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataFileStatus {
    pub path: PathBuf,
    pub sha256: String,
    pub checksum: ChecksumStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FetchReport {
    pub dir: PathBuf,
    pub files: Vec<DataFileStatus>,
    pub images: usize,
    pub per_digit: [usize; 10],
}

impl fmt::Display for FetchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "data directory: {}", self.dir.display())?;
        for s in &self.files {
            let status = match s.checksum {
                ChecksumStatus::Match => "checksum ok",
                ChecksumStatus::Unlisted => "not in checksum list",
            };
            writeln!(f, "  {}  {}  ({status})", s.sha256, s.path.display())?;
        }
        write!(f, "{} images; per digit: {:?}", self.images, self.per_digit)
    }
}

/// How to obtain the data, printed by `fetch-data` before verifying.
pub fn fetch_instructions(dir: &Path) -> String {
    format!(
        "MNIST training files are expected in {dir} (override with {DATA_DIR_ENV}):\n  \
         {MNIST_TRAIN_IMAGES}.gz\n  {MNIST_TRAIN_LABELS}.gz\n\
         Download them from any MNIST mirror, e.g.\n  \
         https://storage.googleapis.com/cvdf-datasets/mnist/{MNIST_TRAIN_IMAGES}.gz\n  \
         https://storage.googleapis.com/cvdf-datasets/mnist/{MNIST_TRAIN_LABELS}.gz\n\
         Uncompressed IDX files work too. A {CHECKSUM_FILE} file in the same directory \
         (sha256sum format) is checked if present.",
        dir = dir.display()
    )
}

fn read_checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(CHECKSUM_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let mut out = BTreeMap::new();
    for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (hash, name) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::Data(format!("{}:{}: malformed line", path.display(), i + 1)))?;
        out.insert(name.trim().trim_start_matches('*').to_string(), hash.to_lowercase());
    }
    Ok(out)
}

/// Verifies the MNIST files in `dir`: present, parseable, consistent and,
/// when a checksum list exists, matching it.
pub fn cmd_fetch_data(dir: &Path) -> Result<FetchReport> {
    let data = MnistData::load_dir(dir)?;
    let sums = read_checksums(dir)?;
    let mut files = Vec::new();
    for stem in [MNIST_TRAIN_IMAGES, MNIST_TRAIN_LABELS] {
        let path = [format!("{stem}.gz"), stem.to_string()]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Data(format!("{stem} disappeared from {}", dir.display())))?;
        let sha256 = sha256_file(&path)?;
        let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
        let checksum = match sums.get(&name) {
            Some(expected) if *expected == sha256 => ChecksumStatus::Match,
            Some(expected) => {
                return Err(Error::Data(format!(
                    "checksum mismatch for {}: expected {expected}, got {sha256}",
                    path.display()
                )))
            }
            None => ChecksumStatus::Unlisted,
        };
        files.push(DataFileStatus { path, sha256, checksum });
    }
    let mut per_digit = [0usize; 10];
    for &l in &data.labels {
        per_digit[l as usize] += 1;
    }
    Ok(FetchReport {
        dir: dir.to_path_buf(),
        files,
        images: data.len(),
        per_digit,
    })
}
