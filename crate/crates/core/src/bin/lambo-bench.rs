use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lambo::bench::{quantile, run_experiment, sig9, ExperimentConfig, OptimizerId};

#[derive(Parser)]
#[command(
    name = "lambo-bench",
    about = "Benchmark harness for sequence optimizers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (optimizer, seed) cell and write traces under --out.
    Run(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, default_value = "bigrams")]
    task: String,
    /// Comma-separated optimizer ids.
    #[arg(long, default_value = "lambo", value_delimiter = ',', value_parser = parse_optimizer)]
    optimizer: Vec<OptimizerId>,
    /// Inclusive range `a..b` or a comma-separated list.
    #[arg(long, default_value = "0..9", value_parser = parse_seeds)]
    seeds: Seeds,
    #[arg(long, default_value_t = 64)]
    rounds: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 512)]
    start_pool: usize,
    #[arg(long)]
    out: PathBuf,
    /// Use the small model and inner-loop preset.
    #[arg(long)]
    desk_scale: bool,
    /// Entropy penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    num_mutations: Option<usize>,
    #[arg(long)]
    mc_samples: Option<usize>,
    /// Base-selection softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Clone)]
struct Seeds(Vec<u64>);

fn parse_optimizer(s: &str) -> Result<OptimizerId, String> {
    OptimizerId::parse(s).ok_or_else(|| {
        let known: Vec<&str> = OptimizerId::ALL.iter().map(|o| o.name()).collect();
        format!(
            "unknown optimizer {s:?}; expected one of {}",
            known.join(", ")
        )
    })
}

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    let bad = |_| format!("bad seed list {s:?}");
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.parse().map_err(bad)?;
        let b: u64 = b.parse().map_err(bad)?;
        if b < a {
            return Err(format!("empty seed range {s:?}"));
        }
        return Ok(Seeds((a..=b).collect()));
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(bad))
        .collect::<Result<_, _>>()
        .map(Seeds)
}

fn main() -> ExitCode {
    let Command::Run(args) = Cli::parse().command;
    let mut cfg = ExperimentConfig::new(
        args.optimizer,
        args.seeds.0,
        args.start_pool,
        args.batch_size,
        args.rounds,
        args.desk_scale,
    );
    cfg.task = args.task;
    let inner = &mut cfg.lambo.inner;
    if let Some(v) = args.lambda {
        inner.entropy_weight = v;
    }
    if let Some(v) = args.num_mutations {
        inner.num_mutations = v;
    }
    if let Some(v) = args.mc_samples {
        inner.mc_samples = v;
    }
    if let Some(v) = args.tau {
        inner.tau = v;
    }
    if let Some(v) = args.inner_steps {
        inner.steps = v;
    }
    if let Some(v) = args.restarts {
        inner.restarts = v;
    }

    let result = match run_experiment(&cfg, Some(&args.out)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    for &id in &cfg.optimizers {
        let finals = result.final_relative_hv(id);
        if !finals.is_empty() {
            println!(
                "{:<24} final relative hypervolume q20 {} q50 {} q80 {}",
                id.name(),
                sig9(quantile(&finals, 0.2)),
                sig9(quantile(&finals, 0.5)),
                sig9(quantile(&finals, 0.8)),
            );
        }
    }
    for c in result.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell {} seed {} failed: {}",
            c.optimizer.name(),
            c.seed,
            c.error.as_deref().unwrap_or_default()
        );
    }
    if result.failures() > 0 {
        return ExitCode::FAILURE;
    }
    println!("wrote {}", args.out.display());
    ExitCode::SUCCESS
}
