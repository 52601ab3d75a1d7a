//! Acceptance criteria as functions returning a verdict, shared by the
//! `acceptance` target and the regular integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use pathnet::async_evolution::{
    run_async, AsyncBudget, AsyncParams, SharedGrid, SharedGridEvaluator, WorkerSettings, SENTINEL,
};
use pathnet::cli::{cmd_stats, RunConfig, SyntheticName, TaskConfig};
use pathnet::evolution::{
    duplicate_module, mutate, tournament_step, EvolutionParams, GridEvaluator, ModuleUtility,
    PathEvaluator, Population,
};
use pathnet::experiment::{run_experiment, write_run, Arm, ExperimentPlan, RunSummary};
use pathnet::numerics::{softmax_xent, Matrix, RngStream};
use pathnet::pathnet::{Module, NetConfig, ParameterGrid, PathGenotype};
use pathnet::tasks::{make_binary_task, make_synthetic, MnistData, SyntheticKind, TaskSpec};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// Gradient correctness

#[derive(Clone, Copy)]
enum Param {
    Head { bias: bool, idx: usize },
    Module { layer: usize, module: usize, bias: bool, idx: usize },
}

fn param_mut(grid: &mut ParameterGrid, p: Param) -> &mut f64 {
    let (m, bias, idx) = match p {
        Param::Head { bias, idx } => (&mut grid.head_mut("t").unwrap().module, bias, idx),
        Param::Module { layer, module, bias, idx } => (grid.module_mut(layer, module), bias, idx),
    };
    if bias {
        &mut m.bias[idx]
    } else {
        &mut m.weight.as_mut_slice()[idx]
    }
}

fn loss(grid: &ParameterGrid, path: &PathGenotype, x: &Matrix, labels: &[usize]) -> f64 {
    let (logits, _) = grid.forward(path, "t", x).unwrap();
    softmax_xent(&logits, labels).unwrap().0
}

/// Central differences against the analytic gradient of every parameter
/// the backward pass reports, over `cases` random grids, paths and inputs.
/// Every fourth case freezes a random path first so that gradients flow
/// through frozen modules.
pub fn gradient_check(cases: usize, seed: u64) -> Verdict {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    // Scale floor for gradients that are zero up to round-off.
    const FLOOR: f64 = 1e-6;
    let cfg = NetConfig {
        layers: 3,
        modules_per_layer: 5,
        neurons_per_module: 4,
        max_active: 3,
        input_dim: 6,
        always_active_frozen: false,
    };
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut failures = Vec::new();
    for case in 0..cases {
        let mut rng = RngStream::new(seed, case as u64);
        let mut grid = ParameterGrid::new(cfg.clone(), &mut rng).unwrap();
        grid.add_head("t", 3, &mut rng);
        for l in 0..cfg.layers {
            for m in 0..cfg.modules_per_layer {
                for b in grid.module_mut(l, m).bias.iter_mut() {
                    *b = rng.gen_range(-0.3..0.3);
                }
            }
        }
        for b in grid.head_mut("t").unwrap().module.bias.iter_mut() {
            *b = rng.gen_range(-0.3..0.3);
        }
        if case % 4 == 3 {
            let frozen = PathGenotype::random(&cfg, &mut rng);
            grid.freeze_path(&frozen);
        }
        let path = PathGenotype::random(&cfg, &mut rng);
        let x = random_matrix(4, cfg.input_dim, &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();

        let (logits, act) = grid.forward(&path, "t", &x).unwrap();
        let (_, dlogits) = softmax_xent(&logits, &labels).unwrap();
        let grads = grid.gradients(&act, &dlogits).unwrap();

        let mut params: Vec<(Param, f64)> = Vec::new();
        for (i, &g) in grads.head.weight.as_slice().iter().enumerate() {
            params.push((Param::Head { bias: false, idx: i }, g));
        }
        for (i, &g) in grads.head.bias.iter().enumerate() {
            params.push((Param::Head { bias: true, idx: i }, g));
        }
        for &((layer, module), ref mg) in &grads.modules {
            for (i, &g) in mg.weight.as_slice().iter().enumerate() {
                params.push((Param::Module { layer, module, bias: false, idx: i }, g));
            }
            for (i, &g) in mg.bias.iter().enumerate() {
                params.push((Param::Module { layer, module, bias: true, idx: i }, g));
            }
        }
        for (p, analytic) in params {
            let orig = *param_mut(&mut grid, p);
            *param_mut(&mut grid, p) = orig + H;
            let up = loss(&grid, &path, &x, &labels);
            *param_mut(&mut grid, p) = orig - H;
            let down = loss(&grid, &path, &x, &labels);
            *param_mut(&mut grid, p) = orig;
            let numeric = (up - down) / (2.0 * H);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
            checked += 1;
            if rel > TOL && failures.len() < 5 {
                failures.push(format!("case {case}: analytic {analytic:e} numeric {numeric:e}"));
            }
        }
    }
    Verdict::new(
        failures.is_empty() && checked > 0,
        format!("{cases} cases, {checked} parameters, worst relative error {worst:.2e} (tolerance {TOL:e}){}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }),
    )
}

// ---------------------------------------------------------------------------
// Frozen invariance

fn frozen_snapshot(grid: &ParameterGrid) -> Vec<((usize, usize), Vec<u64>)> {
    grid.frozen_modules()
        .into_iter()
        .map(|(l, m)| {
            let module = grid.module(l, m);
            let bits = module
                .weight
                .as_slice()
                .iter()
                .chain(&module.bias)
                .map(|v| v.to_bits())
                .collect();
            ((l, m), bits)
        })
        .collect()
}

struct CountingEvaluator<'a> {
    inner: GridEvaluator<'a>,
    utility: &'a mut ModuleUtility,
    evaluations: usize,
}

impl PathEvaluator for CountingEvaluator<'_> {
    fn evaluate(&mut self, g: &PathGenotype) -> pathnet::Result<f64> {
        self.evaluations += 1;
        let f = self.inner.evaluate(g)?;
        self.utility.update(g, f);
        Ok(f)
    }
}

/// Grid after task A: evolved for a few generations, best path frozen,
/// everything else reinitialized, task-B head added.
fn post_freeze_grid(seed: u64) -> (ParameterGrid, PathGenotype, TaskSpec, NetConfig, EvolutionParams) {
    let cfg = NetConfig {
        layers: 3,
        modules_per_layer: 10,
        neurons_per_module: 8,
        max_active: 3,
        input_dim: 16,
        always_active_frozen: false,
    };
    let evo = EvolutionParams {
        population: 8,
        eval_batches: 10,
        lr: 0.05,
        duplication_rate: 0.5,
        ..Default::default()
    };
    let task_a = make_synthetic(SyntheticKind::LinearlySeparable, 16, seed).unwrap();
    let task_b = make_synthetic(SyntheticKind::Parity { k: 2 }, 16, seed).unwrap();
    let mut rng = RngStream::new(seed, 0);
    let mut grid = ParameterGrid::new(cfg.clone(), &mut rng).unwrap();
    grid.add_head(&task_a.id, 2, &mut rng);
    let mut pop = Population::random(&cfg, evo.population, &mut rng);
    let mut stream = task_a.stream(1);
    let mut best = None;
    for gen in 0..30 {
        let mut ev = GridEvaluator {
            grid: &mut grid,
            stream: &mut stream,
            params: &evo,
        };
        best = Some(tournament_step(&mut pop, &mut ev, &cfg, &evo, None, gen, &mut rng).unwrap().genotype_winner);
    }
    let best = best.unwrap();
    grid.freeze_path(&best);
    grid.reinit_unfrozen(&mut rng);
    grid.add_head(&task_b.id, 2, &mut rng);
    (grid, best, task_b, cfg, evo)
}

/// Trains `steps` task-B mini-batches on both engines, with reuse mutation
/// steering paths through the frozen modules and duplication switched on,
/// then compares frozen parameters bit for bit.
pub fn frozen_invariance(steps: usize, seed: u64) -> Verdict {
    let (grid0, best, task_b, cfg, evo) = post_freeze_grid(seed);
    let before = frozen_snapshot(&grid0);
    if before.is_empty() {
        return Verdict::new(false, "nothing was frozen");
    }

    // Serial engine.
    let mut grid = grid0.clone();
    let mut rng = RngStream::new(seed, 10);
    let mut pop = Population::random(&cfg, evo.population, &mut rng);
    let mut stream = task_b.stream(2);
    let mut utility = ModuleUtility::from_params(&cfg, &evo);
    let mut serial_steps = 0;
    let mut through_frozen = 0;
    let mut gen = 0;
    while serial_steps < steps {
        let rec = {
            let mut ev = CountingEvaluator {
                inner: GridEvaluator {
                    grid: &mut grid,
                    stream: &mut stream,
                    params: &evo,
                },
                utility: &mut utility,
                evaluations: 0,
            };
            let rec = tournament_step(&mut pop, &mut ev, &cfg, &evo, Some(&best), gen, &mut rng).unwrap();
            serial_steps += ev.evaluations * evo.eval_batches;
            rec
        };
        if rec.genotype_winner.active_pairs().iter().any(|&(l, m)| grid.is_frozen(l, m)) {
            through_frozen += 1;
        }
        if rng.gen_bool(evo.duplication_rate) {
            let layer = rng.gen_range(0..cfg.layers);
            duplicate_module(&mut grid, &utility, layer, &mut rng).unwrap();
        }
        gen += 1;
    }
    let serial_ok = frozen_snapshot(&grid) == before;
    let serial_trained = grid.modules() != grid0.modules();

    // Async engine: each evaluation is `rounds × eval_batches` steps.
    let asyn = AsyncParams::default();
    let per_eval = asyn.rounds_per_evaluation * evo.eval_batches;
    let shared = SharedGrid::from_grid(&grid0);
    let apop = Population::random(&cfg, evo.population, &mut rng);
    let settings = WorkerSettings {
        cfg: &cfg,
        evo: &evo,
        asyn: &asyn,
        optimal_path: Some(&best),
        max_evaluations: None,
        target_fitness: None,
    };
    let budget = AsyncBudget {
        max_training_rounds: Some((steps / evo.eval_batches) as u64),
        ..Default::default()
    };
    let out = run_async(&apop, &settings, &budget, seed, |w| {
        SharedGridEvaluator::new(&shared, &task_b, 100 + w as u64, &evo)
    })
    .unwrap();
    let async_steps = out.records.len() * per_eval;
    let after = shared.to_grid();
    let async_ok = frozen_snapshot(&after) == before;
    let async_trained = after.modules() != grid0.modules();

    Verdict::new(
        serial_ok && async_ok && serial_trained && async_trained && serial_steps >= steps && async_steps >= steps,
        format!(
            "{} frozen modules; serial: {serial_steps} steps, {through_frozen} winners through frozen modules, frozen {}; \
             async: {async_steps} steps over {} workers, frozen {}",
            before.len(),
            if serial_ok { "bit-identical" } else { "CHANGED" },
            apop.len(),
            if async_ok { "bit-identical" } else { "CHANGED" },
        ),
    )
}

// ---------------------------------------------------------------------------
// Gating soundness

/// Randomizes every module outside the effective active set and checks
/// the forward output is bit-identical. Half the cases keep a frozen path
/// always active.
pub fn gating_soundness(genotypes: usize, seed: u64) -> Verdict {
    let mut mismatches = 0;
    for case in 0..genotypes {
        let mut rng = RngStream::new(seed, case as u64);
        let cfg = NetConfig {
            always_active_frozen: case % 2 == 1,
            ..NetConfig::mnist()
        };
        let mut grid = ParameterGrid::new(cfg.clone(), &mut rng).unwrap();
        grid.add_head("t", 2, &mut rng);
        if cfg.always_active_frozen {
            grid.freeze_path(&PathGenotype::random(&cfg, &mut rng));
        }
        let path = PathGenotype::random(&cfg, &mut rng);
        let x = random_matrix(8, cfg.input_dim, &mut rng);
        let (before, _) = grid.forward(&path, "t", &x).unwrap();
        let mut scrambled = grid.clone();
        for l in 0..cfg.layers {
            let active = grid.effective_active_set(&path, l);
            for m in (0..cfg.modules_per_layer).filter(|m| !active.contains(m)) {
                let module = scrambled.module_mut(l, m);
                let mut fresh = Module::init(module.out_dim(), module.in_dim(), &mut rng);
                for b in fresh.bias.iter_mut() {
                    *b = rng.gen_range(-5.0..5.0);
                }
                *module = fresh;
            }
        }
        let (after, _) = scrambled.forward(&path, "t", &x).unwrap();
        let same = before
            .as_slice()
            .iter()
            .zip(after.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    Verdict::new(
        mismatches == 0,
        format!("{genotypes} genotypes, {mismatches} outputs changed after scrambling inactive modules"),
    )
}

// ---------------------------------------------------------------------------
// Mutation statistics

/// `n` mutations of random genotypes at the default 3×3 setting.
pub fn mutation_statistics(n: usize, seed: u64) -> Verdict {
    let cfg = NetConfig::mnist();
    let params = EvolutionParams::default();
    let p = params.mutation_prob_for(&cfg);
    let m = cfg.modules_per_layer;
    let mut rng = RngStream::new(seed, 0);
    let positions = cfg.layers * cfg.max_active;
    let mut per_position = vec![0usize; positions];
    let mut deltas: BTreeMap<i64, usize> = BTreeMap::new();
    let mut out_of_range = 0;
    for _ in 0..n {
        let g = PathGenotype::random(&cfg, &mut rng);
        let child = mutate(&g, &params, &cfg, None, &mut rng);
        for (pos, (a, b)) in g.layers().iter().flatten().zip(child.layers().iter().flatten()).enumerate() {
            if *b >= m {
                out_of_range += 1;
            }
            if a != b {
                per_position[pos] += 1;
                let d = (*b as i64 - *a as i64).rem_euclid(m as i64);
                let d = if d > m as i64 / 2 { d - m as i64 } else { d };
                *deltas.entry(d).or_default() += 1;
            }
        }
    }
    let total_elements = (n * positions) as f64;
    let mutated: usize = per_position.iter().sum();
    let freq = mutated as f64 / total_elements;
    let sigma = (p * (1.0 - p) / total_elements).sqrt();
    let sigma_pos = (p * (1.0 - p) / n as f64).sqrt();
    let worst_pos = per_position
        .iter()
        .map(|&c| ((c as f64 / n as f64) - p).abs() / sigma_pos)
        .fold(0.0, f64::max);
    let freq_ok = (freq - p).abs() <= 3.0 * sigma && worst_pos <= 3.0;

    let expected = mutated as f64 / 4.0;
    let chi2: f64 = [-2, -1, 1, 2]
        .iter()
        .map(|d| {
            let o = *deltas.get(d).unwrap_or(&0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    let other_deltas = deltas.keys().filter(|d| ![-2, -1, 1, 2].contains(*d)).count();
    let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
    let chi_ok = chi2 < critical && other_deltas == 0;
    Verdict::new(
        freq_ok && chi_ok && out_of_range == 0,
        format!(
            "frequency {freq:.5} vs {p:.5} ({:.2} sigma; worst position {worst_pos:.2} sigma); \
             deltas {deltas:?}, chi2 {chi2:.2} < {critical:.2}; {out_of_range} out of range",
            (freq - p).abs() / sigma
        ),
    )
}

// ---------------------------------------------------------------------------
// Async protocol safety

pub struct AsyncAudit {
    pub completed: bool,
    pub records: usize,
    pub sentinel_copies: usize,
    pub foreign_writes: usize,
    pub pinned_descendants: usize,
    pub workers: usize,
}

/// Runs the async protocol with stub evaluators: worker 0 always scores
/// 1.0, everyone else 0.0. Gives up after `watchdog`.
pub fn async_audit(workers: usize, rounds: u64, seed: u64, watchdog: Duration) -> AsyncAudit {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let cfg = NetConfig::mnist();
        let evo = EvolutionParams {
            population: workers,
            ..Default::default()
        };
        let asyn = AsyncParams::default();
        let mut rng = RngStream::new(seed, 0);
        let pop = Population::random(&cfg, workers, &mut rng);
        let settings = WorkerSettings {
            cfg: &cfg,
            evo: &evo,
            asyn: &asyn,
            optimal_path: None,
            max_evaluations: None,
            target_fitness: None,
        };
        let out = run_async(&pop, &settings, &AsyncBudget::evaluations(rounds), seed, |id| {
            move |_: &PathGenotype| {
                std::thread::yield_now();
                if id == 0 {
                    1.0
                } else {
                    0.0
                }
            }
        });
        let _ = tx.send(out);
    });
    match rx.recv_timeout(watchdog) {
        Ok(Ok(out)) => {
            let sentinel_copies = out
                .records
                .iter()
                .filter_map(|r| r.worker.as_ref().and_then(|w| w.copied_from).map(|_| r))
                .filter(|r| r.fit_b.is_none_or(|f| f == SENTINEL || f < r.fit_a))
                .count();
            AsyncAudit {
                completed: true,
                records: out.records.len(),
                sentinel_copies,
                foreign_writes: out.foreign_fitness_writes,
                pinned_descendants: out.lineage.iter().filter(|&&l| l == 0).count(),
                workers,
            }
        }
        _ => AsyncAudit {
            completed: false,
            records: 0,
            sentinel_copies: 0,
            foreign_writes: 0,
            pinned_descendants: 0,
            workers,
        },
    }
}

pub fn async_safety(seed: u64) -> Verdict {
    let a = async_audit(10, 1000, seed, Duration::from_secs(120));
    let share = a.pinned_descendants as f64 / a.workers as f64;
    Verdict::new(
        a.completed && a.records == 1000 && a.sentinel_copies == 0 && a.foreign_writes == 0 && share >= 0.9,
        format!(
            "completed {} ({} rounds); copies from sentinel slots {}; foreign fitness writes {}; \
             {}/{} final genotypes descend from the pinned slot",
            a.completed, a.records, a.sentinel_copies, a.foreign_writes, a.pinned_descendants, a.workers
        ),
    )
}

// ---------------------------------------------------------------------------
// Module duplication safety

/// `events` duplications on a grid with frozen modules. Module 7 carries
/// utility 1 in every layer, the rest 0; modules 1, 2 and 3 are frozen.
pub fn duplication_safety(events: usize, seed: u64) -> Verdict {
    let cfg = NetConfig {
        input_dim: 8,
        ..NetConfig::mnist()
    };
    let mut rng = RngStream::new(seed, 0);
    let mut grid = ParameterGrid::new(cfg.clone(), &mut rng).unwrap();
    let frozen = PathGenotype::from_layers(vec![vec![1, 2, 3]; cfg.layers]);
    grid.freeze_path(&frozen);
    let before = frozen_snapshot(&grid);
    let mut util = ModuleUtility::new(&cfg, 20, 1e-6);
    for _ in 0..20 {
        util.update(&PathGenotype::from_layers(vec![vec![7]; cfg.layers]), 1.0);
        for low in [[0, 1, 2], [3, 4, 5], [6, 8, 9]] {
            util.update(&PathGenotype::from_layers(vec![low.to_vec(); cfg.layers]), 0.0);
        }
    }
    let mut done = 0;
    let mut from_max = 0;
    let mut into_frozen = 0;
    while done < events {
        let layer = rng.gen_range(0..cfg.layers);
        if let Some((src, dst)) = duplicate_module(&mut grid, &util, layer, &mut rng).unwrap() {
            done += 1;
            from_max += usize::from(src == 7);
            into_frozen += usize::from(grid.is_frozen(layer, dst));
        }
    }
    let intact = frozen_snapshot(&grid) == before;
    let share = from_max as f64 / done as f64;
    Verdict::new(
        intact && into_frozen == 0 && share >= 0.99,
        format!(
            "{done} events; {into_frozen} targeted frozen modules; frozen parameters {}; \
             source = max-utility module in {:.3}%",
            if intact { "intact" } else { "CHANGED" },
            share * 100.0
        ),
    )
}

// ---------------------------------------------------------------------------
// Overlap reporting

fn xor_run_config(arm: Arm, out: &Path, seeds: usize) -> RunConfig {
    let xor = TaskConfig::Synthetic {
        kind: SyntheticName::Xor,
        dim: 2,
        k: None,
        stop_threshold: Some(0.9),
        seed: 0,
    };
    let mut c = RunConfig::new(xor.clone(), xor);
    c.arm = arm;
    c.replicas = seeds;
    c.max_generations = 150;
    c.output_dir = out.to_path_buf();
    c.net = NetConfig {
        layers: 2,
        modules_per_layer: 10,
        neurons_per_module: 16,
        max_active: 3,
        input_dim: 2,
        always_active_frozen: false,
    };
    c.evo = EvolutionParams {
        population: 16,
        eval_batches: 10,
        lr: 0.1,
        ..Default::default()
    };
    c
}

/// Runs PathNet and the independent control over `seeds` seeds and checks
/// that the stats scatter has one row per PathNet run.
pub fn overlap_reporting(seeds: usize, dir: &Path) -> Verdict {
    for arm in [Arm::Pathnet, Arm::Independent] {
        if let Err(e) = pathnet::cli::cmd_run(&xor_run_config(arm, dir, seeds)) {
            return Verdict::new(false, format!("run failed: {e}"));
        }
    }
    let out = match cmd_stats(dir) {
        Ok(o) => o,
        Err(e) => return Verdict::new(false, format!("stats failed: {e}")),
    };
    let csv = std::fs::read_to_string(&out.scatter_path).unwrap_or_default();
    let rows = csv.lines().count().saturating_sub(1);
    let with_speedup = out.report.scatter.iter().filter(|p| p.speedup_vs_independent.is_some()).count();
    let pathnet_runs = out.report.arms.iter().find(|a| a.arm == Arm::Pathnet).map_or(0, |a| a.runs);
    Verdict::new(
        rows == seeds && out.report.scatter.len() == pathnet_runs && pathnet_runs == seeds,
        format!(
            "{rows} scatter rows for {pathnet_runs} PathNet runs ({with_speedup} with a paired speedup); pearson r = {}",
            out.report
                .overlap_speedup_pearson
                .map_or("undefined".into(), |r| format!("{r:.3}"))
        ),
    )
}

// ---------------------------------------------------------------------------
// XOR capability

pub const XOR_THRESHOLD: f64 = 0.95;

pub fn xor_plan(seed: u64) -> ExperimentPlan {
    let t = make_synthetic(SyntheticKind::Xor, 2, seed).unwrap().with_threshold(XOR_THRESHOLD);
    let net = NetConfig {
        layers: 2,
        modules_per_layer: 10,
        neurons_per_module: 16,
        max_active: 3,
        input_dim: 2,
        always_active_frozen: false,
    };
    let mut plan = ExperimentPlan::new(Arm::Pathnet, t.clone(), t, net, seed);
    plan.evo = EvolutionParams {
        population: 16,
        eval_batches: 10,
        lr: 0.1,
        ..Default::default()
    };
    plan.max_generations = 300;
    plan
}

pub fn xor_capability(seeds: u64) -> Verdict {
    let mut hits = 0;
    let mut gens = Vec::new();
    for seed in 1..=seeds {
        let out = pathnet::experiment::run_pathnet_transfer(&xor_plan(seed)).unwrap();
        hits += usize::from(out.task_a.converged);
        gens.push(out.task_a.generations);
    }
    let needed = (seeds as f64 * 0.9).ceil() as usize;
    Verdict::new(
        hits >= needed,
        format!("{hits}/{seeds} seeds reached {XOR_THRESHOLD} within 300 generations (need {needed}); generations {gens:?}"),
    )
}

// ---------------------------------------------------------------------------
// Transfer speedup at full scale

/// (task A digits, task B digits); seed `s` uses entry `(s - 1) % len`.
pub const TRANSFER_PAIRS: [((u8, u8), (u8, u8)); 10] = [
    ((5, 6), (3, 8)),
    ((1, 7), (4, 9)),
    ((0, 8), (2, 3)),
    ((4, 9), (5, 6)),
    ((2, 7), (0, 6)),
    ((3, 5), (1, 8)),
    ((6, 9), (2, 4)),
    ((0, 1), (7, 9)),
    ((3, 8), (5, 6)),
    ((2, 5), (4, 7)),
];

pub fn data_dir() -> PathBuf {
    match std::env::var_os(pathnet::cli::DATA_DIR_ENV) {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

pub fn transfer_plan(arm: Arm, seed: u64, data: &MnistData) -> ExperimentPlan {
    let (a, b) = TRANSFER_PAIRS[((seed - 1) % TRANSFER_PAIRS.len() as u64) as usize];
    let task_a = make_binary_task(data, a, 0.5, seed).unwrap();
    let task_b = make_binary_task(data, b, 0.5, seed).unwrap();
    ExperimentPlan::new(arm, task_a, task_b, NetConfig::mnist(), seed)
}

/// The full three-arm comparison. Summaries land in `out_dir`.
pub fn transfer_speedup(seeds: u64, out_dir: &Path, progress: bool) -> Verdict {
    let data = match MnistData::load_dir(&data_dir()) {
        Ok(d) => Arc::new(d),
        Err(e) => return Verdict::new(false, format!("no MNIST data: {e}")),
    };
    let mut summaries: Vec<RunSummary> = Vec::new();
    for arm in [Arm::Pathnet, Arm::Independent, Arm::Finetune] {
        for seed in 1..=seeds {
            let start = Instant::now();
            let plan = transfer_plan(arm, seed, &data);
            let outcome = run_experiment(&plan).unwrap();
            write_run(out_dir, &plan, &outcome).unwrap();
            let s = RunSummary::new(&plan, &outcome);
            if progress {
                eprintln!(
                    "  {arm} seed {seed} {}->{}: A {} ({:.4}), B {} ({:.4}), {:.0?}",
                    plan.task_a.id,
                    plan.task_b.id,
                    s.outcome.gens_task_a,
                    s.outcome.best_fitness_a,
                    s.outcome.gens_task_b,
                    s.outcome.best_fitness_b,
                    start.elapsed()
                );
            }
            summaries.push(s);
        }
    }
    let report = pathnet::cli::aggregate(&summaries);
    let mean = |arm: Arm| report.arms.iter().find(|a| a.arm == arm).and_then(|a| a.mean_total);
    let converged = |arm: Arm| report.arms.iter().find(|a| a.arm == arm).map_or(0, |a| a.converged);
    let best = |arm: Arm| {
        summaries
            .iter()
            .filter(|s| s.plan.arm == arm)
            .map(|s| s.outcome.best_fitness_a.min(s.outcome.best_fitness_b))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (p, i, f) = (mean(Arm::Pathnet), mean(Arm::Independent), mean(Arm::Finetune));
    let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.1}"));
    let detail = format!(
        "converged runs pathnet {}/{seeds}, independent {}/{seeds}, finetune {}/{seeds}; \
         mean totals pathnet {}, independent {}, finetune {}; speedup {}; \
         best accuracy reached on the harder task per arm: {:.4} / {:.4} / {:.4}",
        converged(Arm::Pathnet),
        converged(Arm::Independent),
        converged(Arm::Finetune),
        fmt(p),
        fmt(i),
        fmt(f),
        fmt(p.zip(i).map(|(p, i)| i / p)),
        best(Arm::Pathnet),
        best(Arm::Independent),
        best(Arm::Finetune),
    );
    let pass = match (p, i, f) {
        (Some(p), Some(i), Some(f)) => p < i && i < f && i / p >= 1.05,
        _ => false,
    };
    Verdict::new(pass, detail)
}
