// Evolve a population of paths with binary tournaments until one of them
// classifies XOR well.

use pathnet::evolution::{tournament_step, EvolutionParams, GridEvaluator, Population};
use pathnet::numerics::RngStream;
use pathnet::tasks::{make_synthetic, SyntheticKind};
use pathnet::{NetConfig, ParameterGrid};

pub fn run() -> pathnet::Result<()> {
    let task = make_synthetic(SyntheticKind::Xor, 2, 5)?;
    let cfg = NetConfig {
        layers: 2,
        modules_per_layer: 10,
        neurons_per_module: 16,
        max_active: 3,
        input_dim: 2,
        always_active_frozen: false,
    };
    let params = EvolutionParams {
        population: 16,
        eval_batches: 10,
        lr: 0.1,
        ..Default::default()
    };
    let mut rng = RngStream::new(5, 0);
    let mut grid = ParameterGrid::new(cfg.clone(), &mut rng)?;
    grid.add_head(&task.id, 2, &mut rng);
    let mut pop = Population::random(&cfg, params.population, &mut rng);
    let mut stream = task.stream(0);

    for generation in 0..300 {
        let mut eval = GridEvaluator {
            grid: &mut grid,
            stream: &mut stream,
            params: &params,
        };
        let rec = tournament_step(&mut pop, &mut eval, &cfg, &params, None, generation, &mut rng)?;
        if generation % 20 == 0 || rec.best_fitness() >= 0.95 {
            println!("gen {generation:>3}: winner {:.3} {:?}", rec.best_fitness(), rec.genotype_winner.layers());
        }
        if rec.best_fitness() >= 0.95 {
            break;
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
