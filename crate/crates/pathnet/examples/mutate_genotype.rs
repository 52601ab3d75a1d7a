// Point mutations with wrap-around, and reuse of a frozen path's genes.

use pathnet::evolution::{mutate, EvolutionParams};
use pathnet::numerics::RngStream;
use pathnet::{NetConfig, PathGenotype};

pub fn run() -> pathnet::Result<()> {
    let cfg = NetConfig::mnist();
    let mut rng = RngStream::new(3, 0);
    let parent = PathGenotype::random(&cfg, &mut rng);
    println!("parent  {:?}", parent.layers());

    // Each gene mutates with probability 1/(N·L) = 1/9 by default.
    let params = EvolutionParams::default();
    for _ in 0..3 {
        println!("child   {:?}", mutate(&parent, &params, &cfg, None, &mut rng).layers());
    }

    // Given a frozen path, a mutated gene takes its entry with probability
    // `reuse_prob` (0.2 by default; 0.5 here).
    let frozen = PathGenotype::from_layers(vec![vec![9, 9, 9]; 3]);
    let always = EvolutionParams {
        mutation_prob: Some(1.0),
        reuse_prob: 0.5,
        ..Default::default()
    };
    println!("reuse   {:?}", mutate(&parent, &always, &cfg, Some(&frozen), &mut rng).layers());
    Ok(())
}

#[allow(dead_code)]
fn main() -> pathnet::Result<()> {
    run()
}
