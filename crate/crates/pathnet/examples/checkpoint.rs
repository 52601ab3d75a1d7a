// Save a grid with a frozen path, reload it and describe it.

use pathnet::cli::InspectReport;
use pathnet::numerics::RngStream;
use pathnet::{NetConfig, ParameterGrid, PathGenotype};

pub fn run() -> pathnet::Result<()> {
    let mut rng = RngStream::new(4, 0);
    let mut grid = ParameterGrid::new(NetConfig::mnist(), &mut rng)?;
    grid.add_head("mnist-5v6", 2, &mut rng);
    grid.freeze_path(&PathGenotype::from_layers(vec![vec![1, 2], vec![3], vec![4, 5, 6]]));

    let dir = std::env::temp_dir().join(format!("pathnet-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("grid.ckpt");
    grid.save(&path)?;
    let loaded = ParameterGrid::load(&path)?;
    assert_eq!(loaded, grid);
    println!("{}", InspectReport::of(&loaded));
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
