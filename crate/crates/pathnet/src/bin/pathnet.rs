use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pathnet::cli::{self, RunConfig, TaskConfig};
use pathnet::experiment::{Arm, Engine};
use pathnet::Error;

#[derive(Parser)]
#[command(name = "pathnet", version, about = "Evolve pathways through a modular network and measure transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one or more seeded transfer experiments.
    Run(Box<RunArgs>),
    /// Aggregate the run summaries in a directory.
    Stats { dir: PathBuf },
    /// Describe a saved parameter grid.
    Inspect { checkpoint: PathBuf },
    /// Show where to get MNIST and verify the local copy.
    FetchData {
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_arm)]
    arm: Option<Arm>,
    #[arg(long, value_parser = parse_engine)]
    engine: Option<Engine>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Async engine: number of workers (and population slots).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_generations: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// e.g. `mnist:5v6` or `synthetic:xor:2`.
    #[arg(long, value_parser = parse_task)]
    task_a: Option<TaskConfig>,
    #[arg(long, value_parser = parse_task)]
    task_b: Option<TaskConfig>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    population: Option<usize>,
    /// Stop threshold for both tasks.
    #[arg(long)]
    threshold: Option<f64>,
    /// Save the final parameter grid next to each summary.
    #[arg(long)]
    checkpoint: bool,
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_engine(s: &str) -> Result<Engine, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskConfig, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn run_config(a: RunArgs) -> pathnet::Result<RunConfig> {
    let mut c = match (&a.config, a.task_a.clone(), a.task_b.clone()) {
        (Some(path), _, _) => RunConfig::load(path)?,
        (None, Some(ta), Some(tb)) => RunConfig::new(ta, tb),
        (None, _, _) => {
            return Err(Error::Input("give --config or both --task-a and --task-b".into()));
        }
    };
    c.arm = a.arm.unwrap_or(c.arm);
    c.engine = a.engine.unwrap_or(c.engine);
    c.seed = a.seed.unwrap_or(c.seed);
    c.replicas = a.replicas.unwrap_or(c.replicas);
    c.workers = a.workers.or(c.workers);
    c.max_generations = a.max_generations.unwrap_or(c.max_generations);
    c.output_dir = a.output_dir.unwrap_or(c.output_dir);
    c.data_dir = a.data_dir.or(c.data_dir);
    c.task_a = a.task_a.unwrap_or(c.task_a);
    c.task_b = a.task_b.unwrap_or(c.task_b);
    c.evo.lr = a.lr.unwrap_or(c.evo.lr);
    c.evo.population = a.population.unwrap_or(c.evo.population);
    c.checkpoint |= a.checkpoint;
    if let Some(t) = a.threshold {
        c.set_threshold(t);
    }
    Ok(c)
}

fn dispatch(command: Command) -> pathnet::Result<()> {
    match command {
        Command::Run(args) => {
            for r in cli::cmd_run(&run_config(*args)?)? {
                println!("{r}");
            }
        }
        Command::Stats { dir } => {
            let out = cli::cmd_stats(&dir)?;
            println!("{}", out.report);
            println!("wrote {} and {}", out.report_path.display(), out.scatter_path.display());
        }
        Command::Inspect { checkpoint } => println!("{}", cli::cmd_inspect(&checkpoint)?),
        Command::FetchData { data_dir } => {
            let dir = cli::resolve_data_dir(data_dir.as_deref());
            println!("{}\n", cli::fetch_instructions(&dir));
            println!("{}", cli::cmd_fetch_data(&dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_USAGE as u8 } else { 0 });
        }
    };
    match dispatch(parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
