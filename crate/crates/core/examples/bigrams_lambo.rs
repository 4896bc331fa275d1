//! One LaMBO run on the Bigrams task at desk scale.
//!
//! `cargo run --release --example bigrams_lambo -- [seed] [rounds]`

use lambo::bench::{desk_scale, start_pool_for_seed, BigramTask};
use lambo::lambo::Oracle;
use lambo::lambo::{run_outer_loop, Lambo, RoundRecord};
use lambo::seq::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let rounds: usize = args.next().map_or(Ok(16), |s| s.parse())?;

    let task = BigramTask::new(Vocabulary::amino_acids());
    let start = start_pool_for_seed(&task, 64, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut opt = Lambo::new(
        desk_scale(8),
        task.vocab().clone(),
        task.t_max(),
        task.num_objectives(),
        &mut rng,
    );
    let mut show = |r: &RoundRecord| {
        println!(
            "round {:>2}  calls {:>3}  rel-hv {:.3}  entropy {:.3}  nll {:>7.3}  {:.1}s",
            r.round,
            r.oracle_calls,
            r.relative_hypervolume,
            r.proposal_entropy.unwrap_or(f64::NAN),
            r.holdout_nll.unwrap_or(f64::NAN),
            r.wall_seconds
        );
        Ok(())
    };
    let trace = run_outer_loop(&mut opt, &task, start, rounds, &mut rng, &mut show)?;
    println!("final archive: {} sequences", trace.archive.len());
    Ok(())
}
