//! PathNet: evolution of pathways through a fixed grid of neural modules,
//! with gradient descent restricted to the active path.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: matrices, layer primitives, loss, SGD, seeded RNG.
//! * [`pathnet`]: the module grid, path-gated forward/backward, freezing.
//! * [`tasks`]: MNIST IDX loading, binary digit tasks, synthetic tasks.
//! * [`evolution`]: serial binary tournaments, mutation, module utility.
//! * [`async_evolution`]: the asynchronous worker protocol over shared state.
//! * [`experiment`]: transfer experiments and their control arms.
//! * [`cli`]: config files, run/stats/inspect commands.

pub mod async_evolution;
pub mod cli;
pub mod error;
pub mod evolution;
pub mod experiment;
pub mod numerics;
pub mod pathnet;
pub mod tasks;

pub use error::{Error, Result};
pub use evolution::{EvolutionParams, GenerationRecord, Population};
pub use numerics::{Matrix, RngStream};
pub use pathnet::{NetConfig, ParameterGrid, PathGenotype};
pub use tasks::TaskSpec;
