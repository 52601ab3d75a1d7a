//! Asynchronous tournament selection: one worker per population slot, all
//! training against one shared parameter grid.
//!
//! Shared state:
//!
//! * [`SharedFitnessArray`]: one atomic `f64` per slot. [`SENTINEL`] means
//!   "being evaluated, cannot win".
//! * [`SharedPopulation`]: one mutex-guarded genotype per slot, so a copy
//!   never observes a half-written genotype.
//! * [`SharedGrid`]: module parameters as relaxed atomics. Concurrent
//!   updates may overwrite each other (Hogwild); single elements are never
//!   torn. Frozen modules are never written.
//!
//! Worker `i` only ever writes fitness slot `i` and population slot `i`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, PoisonError};
use std::thread;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{
    choose_duplication, mutate, EvolutionParams, GenerationRecord, ModuleUtility, Population,
    WorkerInfo,
};
use crate::numerics::{mix, softmax_xent, RngStream};
use crate::pathnet::{count_correct, Module, NetConfig, ParameterGrid, PathGenotype, PathGradients};
use crate::tasks::{TaskSpec, TaskStream};

/// Fitness published while a slot's genotype is under evaluation.
pub const SENTINEL: f64 = -1000.0;

pub struct SharedFitnessArray {
    slots: Vec<AtomicU64>,
    writes: Vec<AtomicU64>,
    foreign_writes: AtomicUsize,
}

impl SharedFitnessArray {
    /// All slots start at [`SENTINEL`].
    pub fn new(size: usize) -> Self {
        SharedFitnessArray {
            slots: (0..size).map(|_| AtomicU64::new(SENTINEL.to_bits())).collect(),
            writes: (0..size).map(|_| AtomicU64::new(0)).collect(),
            foreign_writes: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn read(&self, slot: usize) -> f64 {
        f64::from_bits(self.slots[slot].load(Ordering::Acquire))
    }

    /// Writes `value` into `slot` on behalf of `writer`. Writes by anyone
    /// other than the slot's owner are counted by the audit.
    pub fn publish(&self, writer: usize, slot: usize, value: f64) {
        if writer != slot {
            self.foreign_writes.fetch_add(1, Ordering::Relaxed);
        }
        self.writes[slot].fetch_add(1, Ordering::Relaxed);
        self.slots[slot].store(value.to_bits(), Ordering::Release);
    }

    pub fn foreign_writes(&self) -> usize {
        self.foreign_writes.load(Ordering::Relaxed)
    }

    pub fn write_count(&self, slot: usize) -> u64 {
        self.writes[slot].load(Ordering::Relaxed)
    }

    pub fn snapshot(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.read(i)).collect()
    }
}

/// A population slot plus the founding slot its genotype descends from.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotEntry {
    pub genotype: PathGenotype,
    pub lineage: usize,
}

pub struct SharedPopulation {
    slots: Vec<Mutex<SlotEntry>>,
}

impl SharedPopulation {
    pub fn new(pop: &Population) -> Self {
        SharedPopulation {
            slots: pop
                .slots
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    Mutex::new(SlotEntry {
                        genotype: g.clone(),
                        lineage: i,
                    })
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn read(&self, slot: usize) -> SlotEntry {
        self.slots[slot]
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .clone()
    }

    pub fn write(&self, slot: usize, entry: SlotEntry) {
        *self.slots[slot].lock().unwrap_or_else(PoisonError::into_inner) = entry;
    }

    pub fn entries(&self) -> Vec<SlotEntry> {
        (0..self.len()).map(|i| self.read(i)).collect()
    }
}

struct AtomicModule {
    out_dim: usize,
    in_dim: usize,
    params: Vec<AtomicU64>,
}

impl AtomicModule {
    fn from_module(m: &Module) -> Self {
        let params = m
            .weight
            .as_slice()
            .iter()
            .chain(&m.bias)
            .map(|v| AtomicU64::new(v.to_bits()))
            .collect();
        AtomicModule {
            out_dim: m.out_dim(),
            in_dim: m.in_dim(),
            params,
        }
    }

    fn load_into(&self, m: &mut Module) {
        let n = self.out_dim * self.in_dim;
        for (dst, src) in m.weight.as_mut_slice().iter_mut().zip(&self.params[..n]) {
            *dst = f64::from_bits(src.load(Ordering::Relaxed));
        }
        for (dst, src) in m.bias.iter_mut().zip(&self.params[n..]) {
            *dst = f64::from_bits(src.load(Ordering::Relaxed));
        }
    }

    fn to_module(&self) -> Module {
        let mut m = Module::zeros(self.out_dim, self.in_dim);
        self.load_into(&mut m);
        m
    }

    /// Racy `p -= lr * g`: concurrent updates to the same element may be lost.
    fn sgd(&self, weight: &[f64], bias: &[f64], lr: f64) {
        for (p, g) in self.params.iter().zip(weight.iter().chain(bias)) {
            let v = f64::from_bits(p.load(Ordering::Relaxed)) - lr * g;
            p.store(v.to_bits(), Ordering::Relaxed);
        }
    }

    fn copy_from(&self, other: &AtomicModule) {
        for (dst, src) in self.params.iter().zip(&other.params) {
            dst.store(src.load(Ordering::Relaxed), Ordering::Relaxed);
        }
    }
}

/// The parameter grid as shared, Hogwild-updated state.
///
/// The frozen mask and the set of heads are fixed for the lifetime of a
/// `SharedGrid`; changing them means converting back with
/// [`SharedGrid::to_grid`] between tasks.
pub struct SharedGrid {
    template: ParameterGrid,
    modules: Vec<AtomicModule>,
    heads: BTreeMap<String, AtomicModule>,
}

impl SharedGrid {
    pub fn from_grid(grid: &ParameterGrid) -> Self {
        SharedGrid {
            template: grid.clone(),
            modules: grid.modules().iter().map(AtomicModule::from_module).collect(),
            heads: grid
                .heads()
                .iter()
                .map(|(k, h)| (k.clone(), AtomicModule::from_module(&h.module)))
                .collect(),
        }
    }

    pub fn config(&self) -> &NetConfig {
        self.template.config()
    }

    fn index(&self, layer: usize, module: usize) -> usize {
        layer * self.config().modules_per_layer + module
    }

    pub fn is_frozen(&self, layer: usize, module: usize) -> bool {
        self.template.is_frozen(layer, module)
    }

    /// A plain grid holding the current shared values.
    pub fn to_grid(&self) -> ParameterGrid {
        let mut grid = self.template.clone();
        self.pull_all(&mut grid);
        grid
    }

    fn pull_all(&self, grid: &mut ParameterGrid) {
        let m = self.config().modules_per_layer;
        for (i, am) in self.modules.iter().enumerate() {
            am.load_into(grid.module_mut(i / m, i % m));
        }
        for (task, am) in &self.heads {
            if let Some(h) = grid.head_mut(task) {
                am.load_into(&mut h.module);
            }
        }
    }

    /// Refreshes the modules `path` uses (and the task head) in `local`.
    pub fn pull_path(&self, local: &mut ParameterGrid, path: &PathGenotype, task: &str) -> Result<()> {
        for l in 0..self.config().layers {
            for m in local.effective_active_set(path, l) {
                self.modules[self.index(l, m)].load_into(local.module_mut(l, m));
            }
        }
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::State(format!("no readout head for task `{task}`")))?;
        let local_head = local
            .head_mut(task)
            .ok_or_else(|| Error::State(format!("local grid lacks head `{task}`")))?;
        head.load_into(&mut local_head.module);
        Ok(())
    }

    /// Applies an SGD update to the shared values, skipping frozen modules.
    pub fn apply_gradients(&self, grads: &PathGradients, lr: f64) -> Result<()> {
        for ((l, m), g) in &grads.modules {
            if self.is_frozen(*l, *m) {
                continue;
            }
            self.modules[self.index(*l, *m)].sgd(g.weight.as_slice(), &g.bias, lr);
        }
        let head = self
            .heads
            .get(&grads.task)
            .ok_or_else(|| Error::State(format!("no readout head for task `{}`", grads.task)))?;
        head.sgd(grads.head.weight.as_slice(), &grads.head.bias, lr);
        Ok(())
    }

    pub fn copy_module(&self, layer: usize, src: usize, dst: usize) -> Result<()> {
        if self.is_frozen(layer, dst) {
            return Err(Error::State(format!("module ({layer}, {dst}) is frozen")));
        }
        self.modules[self.index(layer, dst)].copy_from(&self.modules[self.index(layer, src)]);
        Ok(())
    }

    pub fn module(&self, layer: usize, module: usize) -> Module {
        self.modules[self.index(layer, module)].to_module()
    }
}

/// Knobs specific to the asynchronous protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsyncParams {
    /// Number of other slots each worker compares itself against.
    pub tournament_size: usize,
    /// Training rounds (of `eval_batches` mini-batches each) per evaluation.
    pub rounds_per_evaluation: usize,
}

impl Default for AsyncParams {
    fn default() -> Self {
        AsyncParams {
            tournament_size: 20,
            rounds_per_evaluation: 10,
        }
    }
}

/// When the async run stops. Whichever limit is hit first wins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AsyncBudget {
    /// Total evaluations across all workers.
    pub max_evaluations: Option<u64>,
    /// Total training rounds across all workers; each evaluation reserves
    /// `rounds_per_evaluation` of them up front.
    pub max_training_rounds: Option<u64>,
    /// Stop once any worker publishes a fitness at or above this.
    pub target_fitness: Option<f64>,
}

impl AsyncBudget {
    pub fn evaluations(n: u64) -> Self {
        AsyncBudget {
            max_evaluations: Some(n),
            ..Default::default()
        }
    }

    fn evaluation_cap(&self, rounds_per_evaluation: usize) -> Option<u64> {
        let by_rounds = self
            .max_training_rounds
            .map(|r| r / rounds_per_evaluation.max(1) as u64);
        match (self.max_evaluations, by_rounds) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Scores a genotype on behalf of one worker.
pub trait WorkerEvaluator {
    /// Evaluates `genotype` for `rounds` training rounds.
    fn evaluate(&mut self, genotype: &PathGenotype, rounds: usize) -> Result<f64>;

    fn frozen_overlap(&self, _genotype: &PathGenotype) -> usize {
        0
    }

    /// One module-duplication event. The default does nothing.
    fn duplicate(&mut self, _util: &ModuleUtility, _rng: &mut RngStream) -> Result<Option<(usize, usize, usize)>> {
        Ok(None)
    }
}

impl<F> WorkerEvaluator for F
where
    F: FnMut(&PathGenotype) -> f64,
{
    fn evaluate(&mut self, genotype: &PathGenotype, _rounds: usize) -> Result<f64> {
        Ok(self(genotype))
    }
}

/// Trains paths against a [`SharedGrid`]: each mini-batch pulls the path's
/// current parameters, computes gradients locally and pushes the update.
pub struct SharedGridEvaluator<'a> {
    shared: &'a SharedGrid,
    local: ParameterGrid,
    stream: TaskStream,
    params: EvolutionParams,
}

impl<'a> SharedGridEvaluator<'a> {
    pub fn new(shared: &'a SharedGrid, task: &TaskSpec, stream_id: u64, params: &EvolutionParams) -> Self {
        SharedGridEvaluator {
            shared,
            local: shared.to_grid(),
            stream: task.stream(stream_id),
            params: params.clone(),
        }
    }

    fn train_batch(&mut self, genotype: &PathGenotype) -> Result<usize> {
        let task = self.stream.task_id().to_string();
        let batch = self.stream.next_batch(self.params.batch_size);
        self.shared.pull_path(&mut self.local, genotype, &task)?;
        let (logits, act) = self.local.forward(genotype, &task, &batch.x)?;
        let correct = count_correct(&logits, &batch.labels);
        let (_, dlogits) = softmax_xent(&logits, &batch.labels)?;
        let grads = self.local.gradients(&act, &dlogits)?;
        self.shared.apply_gradients(&grads, self.params.lr)?;
        Ok(correct)
    }
}

impl WorkerEvaluator for SharedGridEvaluator<'_> {
    fn evaluate(&mut self, genotype: &PathGenotype, rounds: usize) -> Result<f64> {
        let batches = rounds.max(1) * self.params.eval_batches;
        let mut correct = 0;
        for _ in 0..batches {
            correct += self.train_batch(genotype)?;
        }
        Ok(correct as f64 / (batches * self.params.batch_size) as f64)
    }

    fn frozen_overlap(&self, genotype: &PathGenotype) -> usize {
        genotype
            .active_pairs()
            .into_iter()
            .filter(|&(l, m)| self.shared.is_frozen(l, m))
            .count()
    }

    fn duplicate(&mut self, util: &ModuleUtility, rng: &mut RngStream) -> Result<Option<(usize, usize, usize)>> {
        let layer = rng.gen_range(0..self.shared.config().layers);
        match choose_duplication(util, |m| self.shared.is_frozen(layer, m), layer, rng) {
            Some((src, dst)) => {
                self.shared.copy_module(layer, src, dst)?;
                Ok(Some((layer, src, dst)))
            }
            None => Ok(None),
        }
    }
}

/// Everything a worker shares with its peers.
pub struct SharedState<'a> {
    pub population: &'a SharedPopulation,
    pub fitness: &'a SharedFitnessArray,
    pub utility: &'a Mutex<ModuleUtility>,
    pub stop: &'a AtomicBool,
    pub clock: &'a AtomicU64,
    pub started: &'a AtomicU64,
}

/// Static settings for every worker of one run.
pub struct WorkerSettings<'a> {
    pub cfg: &'a NetConfig,
    pub evo: &'a EvolutionParams,
    pub asyn: &'a AsyncParams,
    pub optimal_path: Option<&'a PathGenotype>,
    pub max_evaluations: Option<u64>,
    pub target_fitness: Option<f64>,
}

/// The per-worker protocol. Repeats until the stop flag is raised or the
/// evaluation budget is spent:
///
/// 1. evaluate the own genotype (the slot shows [`SENTINEL`] if it is new);
/// 2. publish the fitness;
/// 3. sample `B` distinct other slots;
/// 4. if the best evaluated one has fitness `>=` ours, copy it with
///    mutation into our slot and reset our fitness to [`SENTINEL`];
///    otherwise keep both genotype and fitness and re-evaluate.
pub fn worker_loop<E: WorkerEvaluator + ?Sized>(
    worker_id: usize,
    evaluator: &mut E,
    shared: &SharedState<'_>,
    settings: &WorkerSettings<'_>,
    rng: &mut RngStream,
) -> Result<Vec<GenerationRecord>> {
    let p = shared.population.len();
    let b = settings.asyn.tournament_size.min(p.saturating_sub(1));
    let mut records = Vec::new();
    let mut fresh = true;
    while !shared.stop.load(Ordering::Acquire) {
        if let Some(cap) = settings.max_evaluations {
            if shared.started.fetch_add(1, Ordering::AcqRel) >= cap {
                break;
            }
        }
        let own = shared.population.read(worker_id);
        if fresh {
            shared.fitness.publish(worker_id, worker_id, SENTINEL);
        }
        let fit = evaluator.evaluate(&own.genotype, settings.asyn.rounds_per_evaluation)?;
        shared.fitness.publish(worker_id, worker_id, fit);
        shared
            .utility
            .lock()
            .unwrap_or_else(PoisonError::into_inner)
            .update(&own.genotype, fit);
        if settings.target_fitness.is_some_and(|t| fit >= t) {
            shared.stop.store(true, Ordering::Release);
        }

        let mut best: Option<(usize, f64)> = None;
        if b > 0 {
            for k in index::sample(rng, p - 1, b) {
                let slot = if k >= worker_id { k + 1 } else { k };
                let f = shared.fitness.read(slot);
                if f == SENTINEL {
                    continue;
                }
                if best.is_none_or(|(_, bf)| f > bf) {
                    best = Some((slot, f));
                }
            }
        }

        let copy = best.filter(|&(_, f)| f >= fit);
        let (winner, genotype_winner) = match copy {
            Some((src, _)) => {
                let source = shared.population.read(src);
                let child = mutate(&source.genotype, settings.evo, settings.cfg, settings.optimal_path, rng);
                shared.population.write(
                    worker_id,
                    SlotEntry {
                        genotype: child,
                        lineage: source.lineage,
                    },
                );
                shared.fitness.publish(worker_id, worker_id, SENTINEL);
                fresh = true;
                (src, source.genotype)
            }
            None => {
                fresh = false;
                (worker_id, own.genotype)
            }
        };

        let logical_time = shared.clock.fetch_add(1, Ordering::AcqRel);
        records.push(GenerationRecord {
            generation: logical_time,
            slot_a: worker_id,
            slot_b: best.map(|(s, _)| s),
            fit_a: fit,
            fit_b: best.map(|(_, f)| f),
            winner,
            frozen_overlap_count: evaluator.frozen_overlap(&genotype_winner),
            genotype_winner,
            worker: Some(WorkerInfo {
                worker_id,
                logical_time,
                copied_from: copy.map(|(s, _)| s),
            }),
        });

        if worker_id == 0 && settings.evo.duplication_rate > 0.0 && rng.gen_bool(settings.evo.duplication_rate) {
            let util = shared
                .utility
                .lock()
                .unwrap_or_else(PoisonError::into_inner)
                .clone();
            evaluator.duplicate(&util, rng)?;
        }
    }
    Ok(records)
}

/// Result of [`run_async`].
#[derive(Debug)]
pub struct AsyncOutcome {
    /// Final genotypes; fitness is `None` for slots showing [`SENTINEL`].
    pub population: Population,
    /// Founding slot of each final genotype.
    pub lineage: Vec<usize>,
    /// All workers' records, ordered by logical time.
    pub records: Vec<GenerationRecord>,
    pub utility: ModuleUtility,
    /// Fitness writes made by a worker into a slot it does not own.
    pub foreign_fitness_writes: usize,
    pub reached_target: bool,
}

/// Runs one worker per population slot until the budget is spent, then
/// joins them. A panicking or failing worker stops the others and fails
/// the run.
pub fn run_async<E, F>(
    pop: &Population,
    settings: &WorkerSettings<'_>,
    budget: &AsyncBudget,
    seed: u64,
    make_evaluator: F,
) -> Result<AsyncOutcome>
where
    E: WorkerEvaluator,
    F: Fn(usize) -> E + Sync,
{
    let p = pop.len();
    if p == 0 {
        return Err(Error::Input("async run needs at least one worker".into()));
    }
    if budget.max_evaluations.is_none() && budget.max_training_rounds.is_none() && budget.target_fitness.is_none() {
        return Err(Error::Input("async run needs a budget or a target fitness".into()));
    }
    let population = SharedPopulation::new(pop);
    let fitness = SharedFitnessArray::new(p);
    let utility = Mutex::new(ModuleUtility::from_params(settings.cfg, settings.evo));
    let stop = AtomicBool::new(false);
    let clock = AtomicU64::new(0);
    let started = AtomicU64::new(0);
    let shared = SharedState {
        population: &population,
        fitness: &fitness,
        utility: &utility,
        stop: &stop,
        clock: &clock,
        started: &started,
    };
    let settings = WorkerSettings {
        max_evaluations: budget.evaluation_cap(settings.asyn.rounds_per_evaluation),
        target_fitness: budget.target_fitness,
        ..*settings
    };

    let results: Vec<thread::Result<Result<Vec<GenerationRecord>>>> = thread::scope(|s| {
        let handles: Vec<_> = (0..p)
            .map(|id| {
                let shared = &shared;
                let settings = &settings;
                let make_evaluator = &make_evaluator;
                s.spawn(move || {
                    let _guard = StopOnUnwind(shared.stop);
                    let mut rng = RngStream::new(mix(seed), id as u64);
                    let mut evaluator = make_evaluator(id);
                    let out = worker_loop(id, &mut evaluator, shared, settings, &mut rng);
                    if out.is_err() {
                        shared.stop.store(true, Ordering::Release);
                    }
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut records = Vec::new();
    for (worker, r) in results.into_iter().enumerate() {
        match r {
            Ok(Ok(recs)) => records.extend(recs),
            Ok(Err(e)) => return Err(e),
            Err(panic) => {
                let message = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".into());
                return Err(Error::WorkerPanic { worker, message });
            }
        }
    }
    records.sort_by_key(|r| r.generation);

    let entries = population.entries();
    let reached_target = settings
        .target_fitness
        .is_some_and(|t| records.iter().any(|r| r.fit_a >= t));
    Ok(AsyncOutcome {
        population: Population {
            slots: entries.iter().map(|e| e.genotype.clone()).collect(),
            fitness: fitness
                .snapshot()
                .into_iter()
                .map(|f| (f != SENTINEL).then_some(f))
                .collect(),
        },
        lineage: entries.iter().map(|e| e.lineage).collect(),
        records,
        utility: utility.into_inner().unwrap_or_else(PoisonError::into_inner),
        foreign_fitness_writes: fitness.foreign_writes(),
        reached_target,
    })
}

struct StopOnUnwind<'a>(&'a AtomicBool);

impl Drop for StopOnUnwind<'_> {
    fn drop(&mut self) {
        if thread::panicking() {
            self.0.store(true, Ordering::Release);
        }
    }
}
