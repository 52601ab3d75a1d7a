// Plain SGD along one fixed path on the synthetic XOR task.

use pathnet::numerics::RngStream;
use pathnet::tasks::{make_synthetic, SyntheticKind};
use pathnet::{NetConfig, ParameterGrid, PathGenotype};

pub fn run() -> pathnet::Result<()> {
    let task = make_synthetic(SyntheticKind::Xor, 2, 1)?;
    let cfg = NetConfig {
        layers: 2,
        modules_per_layer: 4,
        neurons_per_module: 16,
        max_active: 3,
        input_dim: 2,
        always_active_frozen: false,
    };
    let mut rng = RngStream::new(1, 0);
    let mut grid = ParameterGrid::new(cfg.clone(), &mut rng)?;
    grid.add_head(&task.id, task.classes, &mut rng);
    let path = PathGenotype::fixed_prefix(&cfg);

    let mut stream = task.stream(0);
    for epoch in 0..8 {
        let mut correct = 0;
        for _ in 0..50 {
            let b = stream.next_batch(16);
            correct += grid.train_batch(&path, &task.id, &b.x, &b.labels, 0.1)?;
        }
        println!("block {epoch}: training accuracy {:.3}", correct as f64 / 800.0);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
