// Two-task transfer: evolve on task A, freeze the winning path, then
// evolve on task B with the frozen modules available for reuse.

use pathnet::experiment::{run_pathnet_transfer, Arm, ExperimentPlan};
use pathnet::tasks::{make_synthetic, SyntheticKind};
use pathnet::{EvolutionParams, NetConfig};

pub fn run() -> pathnet::Result<()> {
    let a = make_synthetic(SyntheticKind::Xor, 4, 1)?.with_threshold(0.95);
    let b = make_synthetic(SyntheticKind::LinearlySeparable, 4, 2)?.with_threshold(0.95);
    let net = NetConfig {
        layers: 2,
        modules_per_layer: 10,
        neurons_per_module: 16,
        max_active: 3,
        input_dim: 4,
        always_active_frozen: false,
    };
    let mut plan = ExperimentPlan::new(Arm::Pathnet, a, b, net, 11);
    plan.evo = EvolutionParams {
        population: 16,
        eval_batches: 10,
        lr: 0.1,
        ..Default::default()
    };
    plan.max_generations = 300;

    let out = run_pathnet_transfer(&plan)?;
    println!("task A: {} generations (converged {})", out.gens_task_a(), out.task_a.converged);
    println!("frozen path {:?}", out.frozen_path.as_ref().map(|p| p.layers().to_vec()));
    println!("task B: {} generations (converged {})", out.gens_task_b(), out.task_b.converged);
    println!("frozen modules per layer {:?}", out.grid.frozen_per_layer());
    println!("overlap with final task-B population: {:?}", out.overlap_count);
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
