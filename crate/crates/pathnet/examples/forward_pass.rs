// Build a module grid, pick a path and run a batch through it.

use pathnet::numerics::{Matrix, RngStream};
use pathnet::{NetConfig, ParameterGrid, PathGenotype};

pub fn run() -> pathnet::Result<()> {
    let mut rng = RngStream::new(42, 0);
    let cfg = NetConfig {
        input_dim: 4,
        ..NetConfig::mnist()
    };
    let mut grid = ParameterGrid::new(cfg.clone(), &mut rng)?;
    grid.add_head("demo", 3, &mut rng);

    // Genotype entries name modules per layer; duplicates count once.
    let path = PathGenotype::from_layers(vec![vec![0, 4, 4], vec![1, 2, 9], vec![7, 7, 7]]);
    for l in 0..cfg.layers {
        println!("layer {l}: active {:?}", path.active_set(l));
    }

    let x = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4], [1.0, 0.0, -1.0, 0.5]])?;
    let (logits, act) = grid.forward(&path, "demo", &x)?;
    println!("logits {:?}", logits.as_slice());
    println!("features {:?}", act.features().shape());
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
