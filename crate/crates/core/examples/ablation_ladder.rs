//! Compare full LaMBO against its ablations and NSGA-II on a few seeds.
//!
//! `cargo run --release --example ablation_ladder -- [seeds] [rounds]`

use lambo::bench::{quantile, run_experiment, ExperimentConfig, OptimizerId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(3), |s| s.parse())?;
    let rounds: usize = args.next().map_or(Ok(8), |s| s.parse())?;
    let ladder = vec![
        OptimizerId::Lambo,
        OptimizerId::LamboNoEntropy,
        OptimizerId::LamboDaeProposals,
        OptimizerId::Mbga,
        OptimizerId::Nsga2,
    ];
    let cfg = ExperimentConfig::new(ladder.clone(), (0..seeds).collect(), 64, 8, rounds, true);
    let result = run_experiment(&cfg, None)?;
    for id in ladder {
        let finals = result.final_relative_hv(id);
        println!(
            "{:<20} rel-hv q20 {:.3}  q50 {:.3}  q80 {:.3}",
            id.name(),
            quantile(&finals, 0.2),
            quantile(&finals, 0.5),
            quantile(&finals, 0.8)
        );
    }
    Ok(())
}
