//! One round of latent-space batch search with NEHVI, step by step.

use lambo::acquisition::NehviFactory;
use lambo::bench::{desk_scale, make_start_pool, BigramTask};
use lambo::dae::Dae;
use lambo::gp::{fit, Mtgp, Surrogate};
use lambo::lambo::{run_inner_loop, select_base_set, Oracle, Pool};
use lambo::seq::{detokenize, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = BigramTask::new(Vocabulary::amino_acids());
    let vocab = task.vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pool = Pool::new(make_start_pool(&task, 64, &mut rng)?)?;
    let (seqs, y) = (pool.sequences(), pool.objectives());

    let cfg = desk_scale(4);
    let mut dae = Dae::new(
        cfg.architecture.clone(),
        vocab.len(),
        task.t_max(),
        &mut rng,
    );
    let mut gp = Mtgp::new(task.num_objectives());
    fit(&mut dae, &mut gp, vocab, &seqs, &y, &cfg.fit, &mut rng)?;
    let surrogate = Surrogate::new(dae, gp, vocab.clone(), &seqs, &y)?;

    let base = select_base_set(&pool, cfg.inner.batch_size, cfg.inner.tau, &mut rng);
    let bases: Vec<_> = base.indices.iter().map(|&i| seqs[i].clone()).collect();
    let cond = surrogate.exact().conditioning()?;
    let factory = NehviFactory::new(
        surrogate.exact(),
        &cond,
        pool.reference().to_vec(),
        cfg.inner.mc_samples,
    );
    let out = run_inner_loop(
        &bases,
        &base.weights,
        surrogate.dae(),
        vocab,
        &factory,
        &cfg.inner,
        &mut rng,
    )?;
    for (r, res) in out.restarts.iter().enumerate() {
        let trace: Vec<String> = res.best_trace.iter().map(|v| format!("{v:.4}")).collect();
        println!("restart {r}: best {}", trace.join(" "));
    }
    println!("chose restart {} with value {:.4}", out.restart, out.value);
    for s in &out.batch {
        println!("{}  {:?}", detokenize(s, vocab)?, task.evaluate(s)?);
    }
    Ok(())
}
