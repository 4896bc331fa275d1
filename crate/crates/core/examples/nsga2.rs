//! NSGA-II on Bigrams with single-site uniform mutations.

use lambo::baselines::{GaConfig, Nsga2};
use lambo::bench::{start_pool_for_seed, BigramTask};
use lambo::lambo::run_outer_loop;
use lambo::seq::{detokenize, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = BigramTask::new(Vocabulary::amino_acids());
    let start = start_pool_for_seed(&task, 64, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    rng.set_stream(1);
    let cfg = GaConfig {
        batch_size: 8,
        num_mutations: 1,
        tau: 1.0,
    };
    let mut ga = Nsga2::new(cfg, task.vocab().clone());
    let trace = run_outer_loop(&mut ga, &task, start, 64, &mut rng, &mut |r| {
        if r.round % 8 == 0 {
            println!("round {:>2}  rel-hv {:.3}", r.round, r.relative_hypervolume);
        }
        Ok(())
    })?;
    for (obj, seq) in trace.archive.members() {
        println!("{obj:?}  {}", detokenize(seq, task.vocab())?);
    }
    Ok(())
}
