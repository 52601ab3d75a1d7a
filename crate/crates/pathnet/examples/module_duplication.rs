// Copy high-utility modules over low-utility ones, never onto frozen ones.

use pathnet::evolution::{duplicate_module, ModuleUtility};
use pathnet::numerics::RngStream;
use pathnet::{NetConfig, ParameterGrid, PathGenotype};

pub fn run() -> pathnet::Result<()> {
    let cfg = NetConfig {
        input_dim: 4,
        ..NetConfig::mnist()
    };
    let mut rng = RngStream::new(2, 0);
    let mut grid = ParameterGrid::new(cfg.clone(), &mut rng)?;
    grid.freeze_path(&PathGenotype::from_layers(vec![vec![0]; 3]));

    // Utility is the windowed mean fitness of paths through each module.
    let mut util = ModuleUtility::new(&cfg, 20, 1e-6);
    util.update(&PathGenotype::from_layers(vec![vec![5, 6]; 3]), 0.9);
    util.update(&PathGenotype::from_layers(vec![vec![0, 1, 2]; 3]), 0.2);
    for m in 0..cfg.modules_per_layer {
        print!("{:.2} ", util.value(0, m));
    }
    println!("<- layer 0 utilities");

    for _ in 0..5 {
        if let Some((src, dst)) = duplicate_module(&mut grid, &util, 0, &mut rng)? {
            println!("copied module {src} over module {dst}");
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
