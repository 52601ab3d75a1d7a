//! Serial binary tournament selection over path genotypes.
//!
//! One generation picks two distinct slots, trains and scores both paths,
//! and overwrites the loser with a mutated copy of the winner. Module
//! utility and module duplication live here too, since the async engine
//! reuses them unchanged.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::pathnet::{NetConfig, ParameterGrid, PathGenotype};
use crate::tasks::TaskStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionParams {
    /// Per-element mutation probability; `None` means `1 / (N·L)`.
    pub mutation_prob: Option<f64>,
    /// Mutation deltas are drawn from `[-range, range] \ {0}`.
    pub mutation_range: usize,
    pub population: usize,
    /// Serial tournament size. Only binary tournaments are supported.
    pub tournament_size: usize,
    /// Mini-batches per path evaluation.
    pub eval_batches: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Chance that a mutated gene is taken from the frozen path instead.
    pub reuse_prob: f64,
    /// Chance per generation of one module-duplication event.
    pub duplication_rate: f64,
    pub utility_window: usize,
    pub utility_epsilon: f64,
}

impl Default for EvolutionParams {
    fn default() -> Self {
        EvolutionParams {
            mutation_prob: None,
            mutation_range: 2,
            population: 64,
            tournament_size: 2,
            eval_batches: 50,
            batch_size: 16,
            lr: 1e-4,
            reuse_prob: 0.2,
            duplication_rate: 0.0,
            utility_window: 20,
            utility_epsilon: 1e-6,
        }
    }
}

impl EvolutionParams {
    pub fn mutation_prob_for(&self, cfg: &NetConfig) -> f64 {
        self.mutation_prob
            .unwrap_or(1.0 / (cfg.max_active * cfg.layers) as f64)
    }

    /// Training examples consumed by one path evaluation.
    pub fn examples_per_evaluation(&self) -> usize {
        self.eval_batches * self.batch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: String| {
            Err(Error::Config {
                path: format!("evo.{path}"),
                reason,
            })
        };
        let probs = [
            ("mutation_prob", self.mutation_prob.unwrap_or(0.0)),
            ("reuse_prob", self.reuse_prob),
            ("duplication_rate", self.duplication_rate),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(name, format!("{p} is not a probability"));
            }
        }
        if self.eval_batches == 0 {
            return bad("eval_batches", "must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.population < 2 {
            return bad("population", "must be at least 2".into());
        }
        if self.tournament_size != 2 {
            return bad("tournament_size", "the serial engine runs binary tournaments".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr", format!("{} is not a valid learning rate", self.lr));
        }
        if self.utility_window == 0 {
            return bad("utility_window", "must be at least 1".into());
        }
        Ok(())
    }
}

/// `P` genotype slots and their latest fitness (`None` = not yet evaluated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub slots: Vec<PathGenotype>,
    pub fitness: Vec<Option<f64>>,
}

impl Population {
    pub fn random(cfg: &NetConfig, size: usize, rng: &mut RngStream) -> Self {
        let slots = (0..size).map(|_| PathGenotype::random(cfg, rng)).collect();
        Population {
            slots,
            fitness: vec![None; size],
        }
    }

    pub fn from_slots(slots: Vec<PathGenotype>) -> Self {
        let fitness = vec![None; slots.len()];
        Population { slots, fitness }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Anything that can score a genotype. The real evaluator trains the path;
/// tests plug in stubs.
pub trait PathEvaluator {
    fn evaluate(&mut self, genotype: &PathGenotype) -> Result<f64>;

    /// Number of the genotype's modules that are frozen in the grid.
    fn frozen_overlap(&self, _genotype: &PathGenotype) -> usize {
        0
    }
}

impl<F> PathEvaluator for F
where
    F: FnMut(&PathGenotype) -> f64,
{
    fn evaluate(&mut self, genotype: &PathGenotype) -> Result<f64> {
        Ok(self(genotype))
    }
}

/// Trains `path` for `eval_batches` mini-batches and returns the fraction
/// of those training examples it classified correctly (each batch scored
/// by the forward pass before its update).
pub fn evaluate_path(
    grid: &mut ParameterGrid,
    path: &PathGenotype,
    stream: &mut TaskStream,
    params: &EvolutionParams,
) -> Result<f64> {
    let task = stream.task_id().to_string();
    let mut correct = 0;
    for _ in 0..params.eval_batches {
        let batch = stream.next_batch(params.batch_size);
        correct += grid.train_batch(path, &task, &batch.x, &batch.labels, params.lr)?;
    }
    Ok(correct as f64 / params.examples_per_evaluation() as f64)
}

/// Scores paths by training them on a shared grid.
pub struct GridEvaluator<'a> {
    pub grid: &'a mut ParameterGrid,
    pub stream: &'a mut TaskStream,
    pub params: &'a EvolutionParams,
}

impl PathEvaluator for GridEvaluator<'_> {
    fn evaluate(&mut self, genotype: &PathGenotype) -> Result<f64> {
        evaluate_path(self.grid, genotype, self.stream, self.params)
    }

    fn frozen_overlap(&self, genotype: &PathGenotype) -> usize {
        frozen_overlap(self.grid, genotype)
    }
}

pub fn frozen_overlap(grid: &ParameterGrid, genotype: &PathGenotype) -> usize {
    genotype
        .active_pairs()
        .into_iter()
        .filter(|&(l, m)| grid.is_frozen(l, m))
        .count()
}

/// Copies `g`, mutating each element independently with the configured
/// probability. A mutated element is either taken from `optimal_path`
/// (same layer, random position; only when a path is given) or shifted by
/// a non-zero delta and wrapped into `[0, M)`.
pub fn mutate(
    g: &PathGenotype,
    params: &EvolutionParams,
    cfg: &NetConfig,
    optimal_path: Option<&PathGenotype>,
    rng: &mut RngStream,
) -> PathGenotype {
    let p = params.mutation_prob_for(cfg);
    let m = cfg.modules_per_layer as i64;
    let range = params.mutation_range as i64;
    let mut out = g.clone();
    for (l, row) in out.layers_mut().iter_mut().enumerate() {
        for entry in row.iter_mut() {
            if !rng.gen_bool(p) {
                continue;
            }
            if let Some(opt) = optimal_path {
                if rng.gen_bool(params.reuse_prob) {
                    let src = opt.layer(l);
                    *entry = src[rng.gen_range(0..src.len())];
                    continue;
                }
            }
            if range == 0 {
                continue;
            }
            // Uniform over {-range..=-1, 1..=range}.
            let mut delta = rng.gen_range(-range..range);
            if delta >= 0 {
                delta += 1;
            }
            *entry = (*entry as i64 + delta).rem_euclid(m) as usize;
        }
    }
    out
}

/// One line of the per-generation JSONL stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: u64,
    pub slot_a: usize,
    pub slot_b: Option<usize>,
    pub fit_a: f64,
    pub fit_b: Option<f64>,
    pub winner: usize,
    pub genotype_winner: PathGenotype,
    pub frozen_overlap_count: usize,
    #[serde(flatten, default, skip_serializing_if = "Option::is_none")]
    pub worker: Option<WorkerInfo>,
}

/// Extra fields carried by async-engine records.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerInfo {
    pub worker_id: usize,
    pub logical_time: u64,
    pub copied_from: Option<usize>,
}

impl GenerationRecord {
    /// The better of the two fitnesses seen this generation.
    pub fn best_fitness(&self) -> f64 {
        self.fit_b.map_or(self.fit_a, |b| b.max(self.fit_a))
    }
}

/// One binary tournament. The loser's slot receives a mutated copy of the
/// winner and is marked unevaluated; ties go to a coin flip.
pub fn tournament_step<E: PathEvaluator + ?Sized>(
    pop: &mut Population,
    evaluator: &mut E,
    cfg: &NetConfig,
    params: &EvolutionParams,
    optimal_path: Option<&PathGenotype>,
    generation: u64,
    rng: &mut RngStream,
) -> Result<GenerationRecord> {
    let p = pop.len();
    if p < 2 {
        return Err(Error::Input(format!("tournament needs at least 2 slots, have {p}")));
    }
    let a = rng.gen_range(0..p);
    let mut b = rng.gen_range(0..p - 1);
    if b >= a {
        b += 1;
    }
    let fit_a = evaluator.evaluate(&pop.slots[a])?;
    let fit_b = evaluator.evaluate(&pop.slots[b])?;
    let a_wins = if fit_a == fit_b {
        rng.gen_bool(0.5)
    } else {
        fit_a > fit_b
    };
    let (winner, loser, win_fit) = if a_wins { (a, b, fit_a) } else { (b, a, fit_b) };
    let genotype_winner = pop.slots[winner].clone();
    pop.slots[loser] = mutate(&genotype_winner, params, cfg, optimal_path, rng);
    pop.fitness[winner] = Some(win_fit);
    pop.fitness[loser] = None;
    Ok(GenerationRecord {
        generation,
        slot_a: a,
        slot_b: Some(b),
        fit_a,
        fit_b: Some(fit_b),
        winner,
        frozen_overlap_count: evaluator.frozen_overlap(&genotype_winner),
        genotype_winner,
        worker: None,
    })
}

/// Sliding mean of the fitnesses of evaluated paths through each module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleUtility {
    modules_per_layer: usize,
    window: usize,
    epsilon: f64,
    history: Vec<VecDeque<f64>>,
}

impl ModuleUtility {
    pub fn new(cfg: &NetConfig, window: usize, epsilon: f64) -> Self {
        ModuleUtility {
            modules_per_layer: cfg.modules_per_layer,
            window: window.max(1),
            epsilon,
            history: vec![VecDeque::new(); cfg.module_count()],
        }
    }

    pub fn from_params(cfg: &NetConfig, params: &EvolutionParams) -> Self {
        Self::new(cfg, params.utility_window, params.utility_epsilon)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Adds `fitness` to the window of every module on `g`'s path.
    pub fn update(&mut self, g: &PathGenotype, fitness: f64) {
        for (l, m) in g.active_pairs() {
            let h = &mut self.history[l * self.modules_per_layer + m];
            if h.len() == self.window {
                h.pop_front();
            }
            h.push_back(fitness);
        }
    }

    /// `None` when no evaluated path has used the module yet.
    pub fn mean(&self, layer: usize, module: usize) -> Option<f64> {
        let h = &self.history[layer * self.modules_per_layer + module];
        (!h.is_empty()).then(|| h.iter().sum::<f64>() / h.len() as f64)
    }

    /// Utility used for duplication sampling; modules without data count as 0.
    pub fn value(&self, layer: usize, module: usize) -> f64 {
        self.mean(layer, module).unwrap_or(0.0)
    }
}

pub fn update_utility(util: &mut ModuleUtility, g: &PathGenotype, fitness: f64) {
    util.update(g, fitness);
}

/// Picks a `(source, destination)` pair within `layer`: source with
/// probability proportional to `utility - layer_min + ε`, destination
/// uniformly among non-frozen modules of strictly lower utility.
pub fn choose_duplication(
    util: &ModuleUtility,
    frozen: impl Fn(usize) -> bool,
    layer: usize,
    rng: &mut RngStream,
) -> Option<(usize, usize)> {
    let m = util.modules_per_layer;
    if m < 2 {
        return None;
    }
    let values: Vec<f64> = (0..m).map(|i| util.value(layer, i)).collect();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = values.iter().map(|v| v - min + util.epsilon).collect();
    let total: f64 = weights.iter().sum();
    let src = if total > 0.0 && total.is_finite() {
        let mut target = rng.gen::<f64>() * total;
        let mut pick = m - 1;
        for (i, w) in weights.iter().enumerate() {
            if target < *w {
                pick = i;
                break;
            }
            target -= w;
        }
        pick
    } else {
        rng.gen_range(0..m)
    };
    let dests: Vec<usize> = (0..m)
        .filter(|&i| i != src && !frozen(i) && values[i] < values[src])
        .collect();
    if dests.is_empty() {
        return None;
    }
    Some((src, dests[rng.gen_range(0..dests.len())]))
}

/// Copies a high-utility module over a lower-utility, non-frozen one in
/// the same layer. Returns the `(source, destination)` pair, or `None` when
/// no destination is eligible.
pub fn duplicate_module(
    grid: &mut ParameterGrid,
    util: &ModuleUtility,
    layer: usize,
    rng: &mut RngStream,
) -> Result<Option<(usize, usize)>> {
    let choice = choose_duplication(util, |i| grid.is_frozen(layer, i), layer, rng);
    if let Some((src, dst)) = choice {
        grid.copy_module(layer, src, dst)?;
    }
    Ok(choice)
}
