//! Jointly fit the encoder and multi-task GP on Bigrams data, then predict.

use lambo::bench::{desk_scale, make_start_pool, BigramTask};
use lambo::dae::Dae;
use lambo::gp::{fit, Mtgp, Surrogate};
use lambo::lambo::Oracle;
use lambo::seq::Vocabulary;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let task = BigramTask::new(Vocabulary::amino_acids());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = make_start_pool(&task, 96, &mut rng)?;
    let (train, test) = pool.split_at(64);
    let seqs: Vec<_> = train.iter().map(|r| r.sequence.clone()).collect();
    let y: Vec<_> = train.iter().map(|r| r.objectives.clone()).collect();

    let cfg = desk_scale(8);
    let mut dae = Dae::new(cfg.architecture, task.vocab().len(), task.t_max(), &mut rng);
    let mut gp = Mtgp::new(task.num_objectives());
    let report = fit(
        &mut dae,
        &mut gp,
        task.vocab(),
        &seqs,
        &y,
        &cfg.fit,
        &mut rng,
    )?;
    println!(
        "{} epochs, best {}, holdout nll {:.3}, spearman {:?}",
        report.epochs, report.best_epoch, report.holdout_nll, report.holdout_spearman
    );

    let surrogate = Surrogate::new(dae, gp, task.vocab().clone(), &seqs, &y)?;
    let probe: Vec<_> = test.iter().take(6).map(|r| r.sequence.clone()).collect();
    let feats = surrogate.dae().features(&probe, task.vocab())?;
    let post = surrogate.exact().posterior_from_features(&feats)?;
    for (i, r) in test.iter().take(6).enumerate() {
        let k = task.num_objectives();
        let mean: Vec<String> = (0..k)
            .map(|a| format!("{:.2}", post.mean.get2(i, a)))
            .collect();
        println!("true {:?}  predicted [{}]", r.objectives, mean.join(", "));
    }
    Ok(())
}
