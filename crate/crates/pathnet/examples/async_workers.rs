// One worker thread per population slot, training paths on a shared
// lock-free grid and copying better genotypes from each other.

use pathnet::async_evolution::{run_async, AsyncBudget, AsyncParams, SharedGrid, SharedGridEvaluator, WorkerSettings};
use pathnet::evolution::{EvolutionParams, Population};
use pathnet::numerics::RngStream;
use pathnet::tasks::{make_synthetic, SyntheticKind};
use pathnet::{NetConfig, ParameterGrid};

pub fn run() -> pathnet::Result<()> {
    let task = make_synthetic(SyntheticKind::Xor, 2, 9)?;
    let cfg = NetConfig {
        layers: 2,
        modules_per_layer: 10,
        neurons_per_module: 16,
        max_active: 3,
        input_dim: 2,
        always_active_frozen: false,
    };
    let evo = EvolutionParams {
        population: 8,
        eval_batches: 5,
        lr: 0.1,
        ..Default::default()
    };
    let asyn = AsyncParams {
        tournament_size: 4,
        rounds_per_evaluation: 2,
    };
    let mut rng = RngStream::new(9, 0);
    let mut grid = ParameterGrid::new(cfg.clone(), &mut rng)?;
    grid.add_head(&task.id, 2, &mut rng);
    let shared = SharedGrid::from_grid(&grid);
    let pop = Population::random(&cfg, evo.population, &mut rng);

    let settings = WorkerSettings {
        cfg: &cfg,
        evo: &evo,
        asyn: &asyn,
        optimal_path: None,
        max_evaluations: None,
        target_fitness: None,
    };
    let budget = AsyncBudget {
        max_evaluations: Some(400),
        target_fitness: Some(0.95),
        ..Default::default()
    };
    let out = run_async(&pop, &settings, &budget, 9, |w| SharedGridEvaluator::new(&shared, &task, w as u64, &evo))?;
    let best = out.records.iter().map(|r| r.fit_a).fold(0.0, f64::max);
    println!("{} evaluations, best fitness {best:.3}, target reached {}", out.records.len(), out.reached_target);
    println!("lineage of final slots {:?}", out.lineage);
    println!("foreign fitness writes {}", out.foreign_fitness_writes);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
