// Compare PathNet with the two controls over a few seeds and aggregate
// generation counts, speedups and overlap.

use pathnet::cli::aggregate;
use pathnet::experiment::{run_experiment, Arm, ExperimentPlan, RunSummary};
use pathnet::tasks::{make_synthetic, SyntheticKind};
use pathnet::{EvolutionParams, NetConfig};

pub fn run() -> pathnet::Result<()> {
    let a = make_synthetic(SyntheticKind::Xor, 2, 1)?.with_threshold(0.9);
    let b = make_synthetic(SyntheticKind::Xor, 2, 2)?.with_threshold(0.9);
    let net = NetConfig {
        layers: 2,
        modules_per_layer: 10,
        neurons_per_module: 16,
        max_active: 3,
        input_dim: 2,
        always_active_frozen: false,
    };
    let mut summaries = Vec::new();
    for arm in [Arm::Pathnet, Arm::Independent, Arm::Finetune] {
        for seed in 1..=4 {
            let mut plan = ExperimentPlan::new(arm, a.clone(), b.clone(), net.clone(), seed);
            plan.evo = EvolutionParams {
                population: 16,
                eval_batches: 10,
                lr: 0.1,
                ..Default::default()
            };
            plan.max_generations = 200;
            summaries.push(RunSummary::new(&plan, &run_experiment(&plan)?));
        }
    }
    println!("{}", aggregate(&summaries));
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
