//! Transfer experiments: PathNet against the independent and fine-tuning
//! controls, with identical data budgets per generation.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::async_evolution::{
    run_async, AsyncBudget, AsyncParams, SharedGrid, SharedGridEvaluator, WorkerSettings,
};
use crate::error::{Error, Result};
use crate::evolution::{
    duplicate_module, evaluate_path, frozen_overlap, tournament_step, EvolutionParams,
    GenerationRecord, GridEvaluator, ModuleUtility, PathEvaluator, Population,
};
use crate::numerics::{mix, RngStream};
use crate::pathnet::{Module, NetConfig, ParameterGrid, PathGenotype};
use crate::tasks::TaskSpec;

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_GENERATIONS: u64 = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Independent,
    Finetune,
    Pathnet,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Independent => "independent",
            Arm::Finetune => "finetune",
            Arm::Pathnet => "pathnet",
        })
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Arm::Independent),
            "finetune" => Ok(Arm::Finetune),
            "pathnet" => Ok(Arm::Pathnet),
            other => Err(Error::Input(format!("unknown arm `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Serial,
    Async,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::Serial => "serial",
            Engine::Async => "async",
        })
    }
}

impl FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Engine::Serial),
            "async" => Ok(Engine::Async),
            other => Err(Error::Input(format!("unknown engine `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub arm: Arm,
    pub engine: Engine,
    pub task_a: TaskSpec,
    pub task_b: TaskSpec,
    pub net: NetConfig,
    pub evo: EvolutionParams,
    pub asyn: AsyncParams,
    pub seed: u64,
    /// Per-task guard; unconverged phases are flagged, not errors.
    pub max_generations: u64,
}

impl ExperimentPlan {
    pub fn new(arm: Arm, task_a: TaskSpec, task_b: TaskSpec, net: NetConfig, seed: u64) -> Self {
        ExperimentPlan {
            arm,
            engine: Engine::Serial,
            task_a,
            task_b,
            net,
            evo: EvolutionParams::default(),
            asyn: AsyncParams::default(),
            seed,
            max_generations: DEFAULT_MAX_GENERATIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.evo.validate()?;
        for (name, t) in [("task_a", &self.task_a), ("task_b", &self.task_b)] {
            if t.input_dim != self.net.input_dim {
                return Err(Error::Config {
                    path: format!("{name}.input_dim"),
                    reason: format!(
                        "task has {} features but net.input_dim is {}",
                        t.input_dim, self.net.input_dim
                    ),
                });
            }
        }
        if self.max_generations == 0 {
            return Err(Error::Config {
                path: "max_generations".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// File stem for this run's outputs: `{arm}-{seed}-{taskA}-{taskB}`.
    pub fn file_stem(&self) -> String {
        format!("{}-{}-{}-{}", self.arm, self.seed, self.task_a.id, self.task_b.id)
    }

    /// Head ids for the two tasks; distinct even when the tasks are equal.
    fn head_ids(&self) -> (TaskSpec, TaskSpec) {
        let a = self.task_a.clone();
        let mut b = self.task_b.clone();
        if a.id == b.id {
            let id = format!("{}#B", b.id);
            b = b.with_id(id);
        }
        (a, b)
    }

    fn rng(&self, purpose: u64) -> RngStream {
        RngStream::new(mix(self.seed), purpose)
    }

    fn stream_id(&self, phase: u64) -> u64 {
        mix(self.seed ^ mix(phase))
    }
}

/// How one task went.
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub generations: u64,
    pub converged: bool,
    /// The path that reached the threshold, or the fittest one seen.
    pub best_path: PathGenotype,
    pub best_fitness: f64,
    pub records: Vec<GenerationRecord>,
    pub final_population: Population,
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub arm: Arm,
    pub task_a: PhaseOutcome,
    pub task_b: PhaseOutcome,
    /// Modules of the frozen task-A path present in the final task-B population.
    pub overlap_count: Option<usize>,
    /// Path frozen after task A (PathNet arm only).
    pub frozen_path: Option<PathGenotype>,
    /// Frozen modules as they were right after freezing.
    pub frozen_snapshot: Vec<((usize, usize), Module)>,
    pub grid: ParameterGrid,
}

impl TransferOutcome {
    pub fn gens_task_a(&self) -> u64 {
        self.task_a.generations
    }

    pub fn gens_task_b(&self) -> u64 {
        self.task_b.generations
    }

    pub fn total(&self) -> u64 {
        self.task_a.generations + self.task_b.generations
    }

    pub fn converged(&self) -> bool {
        self.task_a.converged && self.task_b.converged
    }
}

/// Counts distinct `(layer, module)` pairs of `frozen_path` used by any
/// genotype in `population`.
pub fn overlap_metric(population: &[PathGenotype], frozen_path: &PathGenotype) -> usize {
    let used: std::collections::BTreeSet<(usize, usize)> =
        population.iter().flat_map(|g| g.active_pairs()).collect();
    frozen_path
        .active_pairs()
        .into_iter()
        .filter(|p| used.contains(p))
        .count()
}

/// `control.total / pathnet.total`; `None` unless both runs converged.
pub fn speedup_ratio(control: &TransferOutcome, pathnet: &TransferOutcome) -> Option<f64> {
    (control.converged() && pathnet.converged()).then(|| control.total() as f64 / pathnet.total() as f64)
}

pub fn run_experiment(plan: &ExperimentPlan) -> Result<TransferOutcome> {
    match plan.arm {
        Arm::Pathnet => run_pathnet_transfer(plan),
        Arm::Independent | Arm::Finetune => run_control(plan),
    }
}

/// Evolve on task A, freeze the winner, reinitialize the rest, then evolve
/// a fresh population on task B.
pub fn run_pathnet_transfer(plan: &ExperimentPlan) -> Result<TransferOutcome> {
    if plan.arm != Arm::Pathnet {
        return Err(Error::Input(format!("run_pathnet_transfer called for arm {}", plan.arm)));
    }
    plan.validate()?;
    let (task_a, task_b) = plan.head_ids();
    let mut init_rng = plan.rng(1);
    let mut grid = ParameterGrid::new(plan.net.clone(), &mut init_rng)?;
    grid.add_head(&task_a.id, task_a.classes, &mut init_rng);

    let a = evolve_phase(plan, &mut grid, &task_a, None, 0)?;

    grid.freeze_path(&a.best_path);
    let frozen_snapshot = grid
        .frozen_modules()
        .into_iter()
        .map(|(l, m)| ((l, m), grid.module(l, m).clone()))
        .collect();
    grid.reinit_unfrozen(&mut init_rng);
    grid.add_head(&task_b.id, task_b.classes, &mut init_rng);

    let b = evolve_phase(plan, &mut grid, &task_b, Some(&a.best_path), 1)?;
    let overlap = overlap_metric(&b.final_population.slots, &a.best_path);
    Ok(TransferOutcome {
        arm: plan.arm,
        frozen_path: Some(a.best_path.clone()),
        task_a: a,
        task_b: b,
        overlap_count: Some(overlap),
        frozen_snapshot,
        grid,
    })
}

fn evolve_phase(
    plan: &ExperimentPlan,
    grid: &mut ParameterGrid,
    task: &TaskSpec,
    optimal_path: Option<&PathGenotype>,
    phase: u64,
) -> Result<PhaseOutcome> {
    match plan.engine {
        Engine::Serial => evolve_serial(plan, grid, task, optimal_path, phase),
        Engine::Async => evolve_async(plan, grid, task, optimal_path, phase),
    }
}

/// Feeds every evaluation into the module-utility windows.
struct Tracking<'a, E> {
    inner: E,
    utility: &'a mut ModuleUtility,
}

impl<E: PathEvaluator> PathEvaluator for Tracking<'_, E> {
    fn evaluate(&mut self, genotype: &PathGenotype) -> Result<f64> {
        let f = self.inner.evaluate(genotype)?;
        self.utility.update(genotype, f);
        Ok(f)
    }

    fn frozen_overlap(&self, genotype: &PathGenotype) -> usize {
        self.inner.frozen_overlap(genotype)
    }
}

fn evolve_serial(
    plan: &ExperimentPlan,
    grid: &mut ParameterGrid,
    task: &TaskSpec,
    optimal_path: Option<&PathGenotype>,
    phase: u64,
) -> Result<PhaseOutcome> {
    let mut rng = plan.rng(10 + phase);
    let mut stream = task.stream(plan.stream_id(phase));
    let mut pop = Population::random(&plan.net, plan.evo.population, &mut rng);
    let mut utility = ModuleUtility::from_params(&plan.net, &plan.evo);
    let mut records = Vec::new();
    let mut best: Option<(PathGenotype, f64)> = None;
    let mut converged = false;

    for generation in 0..plan.max_generations {
        let rec = {
            let mut evaluator = Tracking {
                inner: GridEvaluator {
                    grid: &mut *grid,
                    stream: &mut stream,
                    params: &plan.evo,
                },
                utility: &mut utility,
            };
            tournament_step(&mut pop, &mut evaluator, &plan.net, &plan.evo, optimal_path, generation, &mut rng)?
        };
        if plan.evo.duplication_rate > 0.0 && rng.gen_bool(plan.evo.duplication_rate) {
            let layer = rng.gen_range(0..plan.net.layers);
            duplicate_module(grid, &utility, layer, &mut rng)?;
        }
        let fit = rec.best_fitness();
        if best.as_ref().is_none_or(|(_, f)| fit > *f) {
            best = Some((rec.genotype_winner.clone(), fit));
        }
        converged = fit >= task.stop_threshold;
        if converged {
            best = Some((rec.genotype_winner.clone(), fit));
        }
        records.push(rec);
        if converged {
            break;
        }
    }
    let (best_path, best_fitness) = best.expect("at least one generation");
    Ok(PhaseOutcome {
        generations: records.len() as u64,
        converged,
        best_path,
        best_fitness,
        records,
        final_population: pop,
    })
}

fn evolve_async(
    plan: &ExperimentPlan,
    grid: &mut ParameterGrid,
    task: &TaskSpec,
    optimal_path: Option<&PathGenotype>,
    phase: u64,
) -> Result<PhaseOutcome> {
    let mut rng = plan.rng(10 + phase);
    let pop = Population::random(&plan.net, plan.evo.population, &mut rng);
    let shared = SharedGrid::from_grid(grid);
    let settings = WorkerSettings {
        cfg: &plan.net,
        evo: &plan.evo,
        asyn: &plan.asyn,
        optimal_path,
        max_evaluations: None,
        target_fitness: None,
    };
    let budget = AsyncBudget {
        max_evaluations: Some(plan.max_generations),
        max_training_rounds: None,
        target_fitness: Some(task.stop_threshold),
    };
    let base_stream = plan.stream_id(phase);
    let out = run_async(&pop, &settings, &budget, mix(plan.seed ^ phase), |worker| {
        SharedGridEvaluator::new(&shared, task, base_stream ^ mix(worker as u64 + 1), &plan.evo)
    })?;
    *grid = shared.to_grid();

    let mut records = out.records;
    let hit = records.iter().position(|r| r.fit_a >= task.stop_threshold);
    let (best_path, best_fitness) = match hit {
        Some(i) => (records[i].genotype_winner.clone(), records[i].fit_a),
        None => records
            .iter()
            .max_by(|a, b| a.fit_a.total_cmp(&b.fit_a))
            .map(|r| (r.genotype_winner.clone(), r.fit_a))
            .ok_or_else(|| Error::State("async phase produced no evaluations".into()))?,
    };
    if let Some(i) = hit {
        records.truncate(i + 1);
    }
    Ok(PhaseOutcome {
        generations: records.len() as u64,
        converged: hit.is_some(),
        best_path,
        best_fitness,
        records,
        final_population: out.population,
    })
}

/// Controls train the fixed path `0..N` in every layer, two evaluation
/// windows per generation, with no evolution.
pub fn run_control(plan: &ExperimentPlan) -> Result<TransferOutcome> {
    if plan.arm == Arm::Pathnet {
        return Err(Error::Input("run_control called for the pathnet arm".into()));
    }
    plan.validate()?;
    let (task_a, task_b) = plan.head_ids();
    let path = PathGenotype::fixed_prefix(&plan.net);
    let mut init_rng = plan.rng(1);
    let mut grid = ParameterGrid::new(plan.net.clone(), &mut init_rng)?;
    grid.add_head(&task_a.id, task_a.classes, &mut init_rng);
    let a = train_fixed(plan, &mut grid, &task_a, &path, 0)?;

    if plan.arm == Arm::Independent {
        grid = ParameterGrid::new(plan.net.clone(), &mut init_rng)?;
    }
    grid.add_head(&task_b.id, task_b.classes, &mut init_rng);
    let b = train_fixed(plan, &mut grid, &task_b, &path, 1)?;
    Ok(TransferOutcome {
        arm: plan.arm,
        task_a: a,
        task_b: b,
        overlap_count: None,
        frozen_path: None,
        frozen_snapshot: Vec::new(),
        grid,
    })
}

fn train_fixed(
    plan: &ExperimentPlan,
    grid: &mut ParameterGrid,
    task: &TaskSpec,
    path: &PathGenotype,
    phase: u64,
) -> Result<PhaseOutcome> {
    let mut stream = task.stream(plan.stream_id(phase));
    let mut records = Vec::new();
    let mut best_fitness = f64::NEG_INFINITY;
    let mut converged = false;
    for generation in 0..plan.max_generations {
        let fit_a = evaluate_path(grid, path, &mut stream, &plan.evo)?;
        let fit_b = evaluate_path(grid, path, &mut stream, &plan.evo)?;
        let rec = GenerationRecord {
            generation,
            slot_a: 0,
            slot_b: Some(0),
            fit_a,
            fit_b: Some(fit_b),
            winner: 0,
            genotype_winner: path.clone(),
            frozen_overlap_count: frozen_overlap(grid, path),
            worker: None,
        };
        best_fitness = best_fitness.max(rec.best_fitness());
        converged = rec.best_fitness() >= task.stop_threshold;
        records.push(rec);
        if converged {
            break;
        }
    }
    Ok(PhaseOutcome {
        generations: records.len() as u64,
        converged,
        best_path: path.clone(),
        best_fitness,
        records,
        final_population: Population::from_slots(vec![path.clone()]),
    })
}

/// What a run was asked to do, as written to the summary file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub arm: Arm,
    pub engine: Engine,
    pub task_a: String,
    pub task_b: String,
    pub net: NetConfig,
    pub evo: EvolutionParams,
    pub asyn: AsyncParams,
    pub seed: u64,
    pub max_generations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub gens_task_a: u64,
    pub gens_task_b: u64,
    pub total: u64,
    pub converged_a: bool,
    pub converged_b: bool,
    pub overlap_count: Option<usize>,
    pub frozen_path: Option<PathGenotype>,
    pub best_path_b: PathGenotype,
    pub best_fitness_a: f64,
    pub best_fitness_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub plan: PlanSummary,
    pub outcome: OutcomeSummary,
}

impl RunSummary {
    pub fn new(plan: &ExperimentPlan, outcome: &TransferOutcome) -> Self {
        RunSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            plan: PlanSummary {
                arm: plan.arm,
                engine: plan.engine,
                task_a: plan.task_a.id.clone(),
                task_b: plan.task_b.id.clone(),
                net: plan.net.clone(),
                evo: plan.evo.clone(),
                asyn: plan.asyn.clone(),
                seed: plan.seed,
                max_generations: plan.max_generations,
            },
            outcome: OutcomeSummary {
                gens_task_a: outcome.gens_task_a(),
                gens_task_b: outcome.gens_task_b(),
                total: outcome.total(),
                converged_a: outcome.task_a.converged,
                converged_b: outcome.task_b.converged,
                overlap_count: outcome.overlap_count,
                frozen_path: outcome.frozen_path.clone(),
                best_path_b: outcome.task_b.best_path.clone(),
                best_fitness_a: outcome.task_a.best_fitness,
                best_fitness_b: outcome.task_b.best_fitness,
            },
        }
    }

    pub fn converged(&self) -> bool {
        self.outcome.converged_a && self.outcome.converged_b
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0) as u32;
        if found != SUMMARY_SCHEMA_VERSION {
            return Err(Error::Schema {
                file: path.to_path_buf(),
                expected: SUMMARY_SCHEMA_VERSION,
                found,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// One line of the records file: a generation record tagged with its task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    #[serde(flatten)]
    pub record: GenerationRecord,
}

/// Writes `{stem}.json` and `{stem}.jsonl` into `dir`; returns both paths.
pub fn write_run(dir: &Path, plan: &ExperimentPlan, outcome: &TransferOutcome) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let stem = plan.file_stem();
    let summary_path = dir.join(format!("{stem}.json"));
    let records_path = dir.join(format!("{stem}.jsonl"));
    fs::write(&summary_path, serde_json::to_string_pretty(&RunSummary::new(plan, outcome))?)?;
    let mut w = BufWriter::new(File::create(&records_path)?);
    for (phase, recs) in [("A", &outcome.task_a.records), ("B", &outcome.task_b.records)] {
        for r in recs {
            let line = PhaseRecord {
                phase: phase.to_string(),
                record: r.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok((summary_path, records_path))
}
