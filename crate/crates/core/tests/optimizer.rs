//! Base selection, inner-loop mechanics, baselines and the outer loop.

use lambo::acquisition::{
    hypervolume_improvement, AcqError, Acquisition, AcquisitionFactory, Constant, NehviFactory,
};
use lambo::baselines::{mbga_config, uniform_mutation, GaConfig, Nsga2};
use lambo::bench::{desk_scale, make_start_pool, BigramTask};
use lambo::dae::{ArchitectureConfig, Batch, Dae};
use lambo::gp::{Mtgp, Surrogate};
use lambo::lambo::{
    init_latents, rank_weights, restart_draw, run_inner_loop, run_outer_loop, select_base_set,
    CandidateRecord, InnerLoopConfig, Lambo, Oracle, Pool, ProposalSource, RoundRecord,
};
use lambo::seq::{tokenize, TokenSequence, Vocabulary};
use lambo::tape::{Tape, Var};
use lambo::tensor::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        kernel_width: 3,
        channels: 8,
        latent_dim: 4,
        shared_encoder_blocks: 1,
        disc_encoder_blocks: 1,
        decoder_blocks: 1,
    }
}

struct Setup {
    task: BigramTask,
    pool: Pool,
    dae: Dae,
    surrogate: Surrogate,
}

fn setup(seed: u64, n: usize) -> Setup {
    let task = BigramTask::new(Vocabulary::amino_acids());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = make_start_pool(&task, n, &mut rng).unwrap();
    let pool = Pool::new(start).unwrap();
    let dae = Dae::new(small_arch(), task.vocab().len(), task.t_max(), &mut rng);
    let mut gp = Mtgp::new(3);
    gp.set_noise(&[0.1; 3]);
    let surrogate = Surrogate::new(
        dae.clone(),
        gp,
        task.vocab().clone(),
        &pool.sequences(),
        &pool.objectives(),
    )
    .unwrap();
    Setup {
        task,
        pool,
        dae,
        surrogate,
    }
}

fn inner_cfg(b: usize) -> InnerLoopConfig {
    InnerLoopConfig {
        restarts: 2,
        steps: 4,
        batch_size: b,
        ..InnerLoopConfig::default()
    }
}

fn no_special(seqs: &[TokenSequence], vocab: &Vocabulary) -> bool {
    seqs.iter().all(|s| {
        s.ids()[..s.len(vocab)]
            .iter()
            .all(|&i| !vocab.is_special(i))
    })
}

/// Pearson chi-square statistic of `counts` against `expected` probabilities.
fn chi_square(counts: &[usize], expected: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .zip(expected)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rank_weights_ignore_monotone_transforms(
        pool in prop::collection::vec(prop::collection::vec(0i32..6, 3), 1..24),
        scale in 0.1f64..10.0,
        shift in -5.0f64..5.0,
    ) {
        let raw: Vec<Vec<f64>> = pool
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let warped: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| vec![scale * r[0] + shift, r[1].powi(3), (0.3 * r[2]).exp()])
            .collect();
        let a = rank_weights(&raw, 1.0);
        let b = rank_weights(&warped, 1.0);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_weights_follow_permutations(
        pool in prop::collection::vec(prop::collection::vec(0i32..6, 2), 1..24),
        seed in any::<u64>(),
        tau in 0.1f64..4.0,
    ) {
        let raw: Vec<Vec<f64>> = pool
            .iter()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect();
        let mut perm: Vec<usize> = (0..raw.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| raw[i].clone()).collect();
        let a = rank_weights(&raw, tau);
        let b = rank_weights(&shuffled, tau);
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((b[j] - a[i]).abs() < 1e-12);
        }
    }
}

fn chain_pool(n: usize) -> Pool {
    let vocab = Vocabulary::amino_acids();
    let letters = "ACDEFGHIKLMNPQRSTVWY";
    let start = (0..n)
        .map(|i| CandidateRecord {
            sequence: tokenize(&letters[i..i + 1], &vocab, 4).unwrap(),
            objectives: vec![i as f64, i as f64],
            round: 0,
        })
        .collect();
    Pool::new(start).unwrap()
}

#[test]
fn base_inclusion_grows_with_weight() {
    let pool = chain_pool(10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = [0usize; 10];
    for _ in 0..20_000 {
        let base = select_base_set(&pool, 4, 0.3, &mut rng);
        assert!(!base.with_replacement);
        assert!(base.indices.contains(&9));
        for i in base.indices {
            hits[i] += 1;
        }
    }
    assert_eq!(hits[9], 20_000);
    for i in 1..9 {
        assert!(hits[i] > hits[i - 1], "{hits:?}");
    }
}

#[test]
fn small_pools_fill_with_replacement() {
    let pool = chain_pool(3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = select_base_set(&pool, 5, 1.0, &mut rng);
    assert!(base.with_replacement);
    assert_eq!(base.indices.len(), 5);
    assert!((base.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn restart_draws_match_weights() {
    let w = [0.5, 0.3, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 3];
    for _ in 0..3_000 {
        for i in restart_draw(&w, 10, &mut rng) {
            counts[i] += 1;
        }
    }
    // 0.999 quantile of chi-square with 2 degrees of freedom
    assert!(chi_square(&counts, &w) < 13.82, "{counts:?}");
}

#[test]
fn uniform_mutation_is_uniform_over_other_tokens() {
    let vocab = Vocabulary::amino_acids();
    let seq = tokenize("A", &vocab, 4).unwrap();
    let regular = vocab.regular_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = vec![0usize; vocab.len()];
    for _ in 0..19_000 {
        let m = uniform_mutation(&seq, 1, &vocab, &mut rng).unwrap();
        counts[m.ids()[0]] += 1;
    }
    assert_eq!(counts[vocab.id("A").unwrap()], 0);
    let others: Vec<usize> = regular
        .iter()
        .filter(|&&i| i != vocab.id("A").unwrap())
        .map(|&i| counts[i])
        .collect();
    assert_eq!(others.len(), 19);
    // 0.999 quantile of chi-square with 18 degrees of freedom
    assert!(chi_square(&others, &[1.0 / 19.0; 19]) < 42.31, "{others:?}");
}

#[test]
fn zero_corruption_latents_are_plain_encodings() {
    let s = setup(5, 8);
    let vocab = s.task.vocab();
    let bases: Vec<TokenSequence> = s.pool.sequences()[..3].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (z, plans, _) = init_latents(&bases, &s.dae, vocab, 0, &mut rng).unwrap();
    assert!(plans.iter().all(|p| p.positions().is_empty()));
    let mut tape = Tape::new();
    let p = s.dae.bind(&mut tape, false);
    let plain = s
        .dae
        .encode(&mut tape, &p, &Batch::new(&bases, vocab).unwrap())
        .unwrap();
    assert_eq!(&z, tape.value(plain));

    let a = init_latents(&bases, &s.dae, vocab, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = init_latents(&bases, &s.dae, vocab, 2, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

fn nehvi_loop(s: &Setup, cfg: &InnerLoopConfig, seed: u64) -> lambo::lambo::InnerLoopResult {
    let cond = s.surrogate.exact().conditioning().unwrap();
    let factory = NehviFactory::new(
        s.surrogate.exact(),
        &cond,
        s.pool.reference().to_vec(),
        cfg.mc_samples,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = select_base_set(&s.pool, cfg.batch_size, cfg.tau, &mut rng);
    let seqs = s.pool.sequences();
    let bases: Vec<TokenSequence> = base.indices.iter().map(|&i| seqs[i].clone()).collect();
    run_inner_loop(
        &bases,
        &base.weights,
        s.surrogate.dae(),
        s.task.vocab(),
        &factory,
        cfg,
        &mut rng,
    )
    .unwrap()
}

#[test]
fn best_value_never_decreases() {
    let s = setup(8, 16);
    let cfg = InnerLoopConfig {
        steps: 8,
        step_size: 0.5,
        ..inner_cfg(4)
    };
    let out = nehvi_loop(&s, &cfg, 9);
    for r in &out.restarts {
        assert_eq!(r.best_trace.len(), cfg.steps + 1);
        assert!(r.best_trace.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(r.value, *r.best_trace.last().unwrap());
    }
    let max = out
        .restarts
        .iter()
        .map(|r| r.value)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.value, max);
    assert_eq!(out.restarts[out.restart].value, max);
    assert!(no_special(&out.batch, s.task.vocab()));
}

#[test]
fn inner_loop_is_deterministic() {
    let s = setup(10, 12);
    let cfg = inner_cfg(3);
    let a = nehvi_loop(&s, &cfg, 11);
    let b = nehvi_loop(&s, &cfg, 11);
    assert_eq!(a.batch, b.batch);
    assert_eq!(a.value.to_bits(), b.value.to_bits());
}

#[test]
fn zero_steps_return_single_mutants() {
    let s = setup(12, 12);
    let cfg = InnerLoopConfig {
        restarts: 1,
        steps: 0,
        ..inner_cfg(4)
    };
    let out = nehvi_loop(&s, &cfg, 13);
    assert_eq!(out.restarts.len(), 1);
    assert_eq!(out.restarts[0].best_trace.len(), 1);
    assert_eq!(out.restarts[0].entropies.len(), 1);
    let seqs = s.pool.sequences();
    for q in &out.batch {
        assert!(seqs.iter().any(|p| p.hamming(q) <= 1));
    }
}

#[test]
fn zero_step_size_keeps_latents_fixed() {
    let s = setup(14, 12);
    let cfg = InnerLoopConfig {
        step_size: 0.0,
        steps: 5,
        ..inner_cfg(3)
    };
    let out = nehvi_loop(&s, &cfg, 15);
    for r in &out.restarts {
        assert_eq!(r.entropies.len(), 6);
        assert!(r.entropies.iter().all(|&e| e == r.entropies[0]));
    }
}

#[test]
fn heavy_entropy_penalty_lowers_entropy() {
    let s = setup(16, 12);
    let cfg = InnerLoopConfig {
        restarts: 1,
        steps: 10,
        step_size: 1e-5,
        entropy_weight: 1e3,
        ..inner_cfg(4)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let seqs = s.pool.sequences();
    let out = run_inner_loop(
        &seqs[..4],
        &[0.25; 4],
        &s.dae,
        s.task.vocab(),
        &Constant(0.0),
        &cfg,
        &mut rng,
    )
    .unwrap();
    let e = &out.restarts[0].entropies;
    assert!(e.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{e:?}");
    assert!(e.last().unwrap() < &e[0]);
}

/// Scores a batch by its true hypervolume improvement on the bigram task.
struct OracleImprovement<'a> {
    task: &'a BigramTask,
    observed: Vec<Vec<f64>>,
    reference: Vec<f64>,
}

impl Acquisition for OracleImprovement<'_> {
    fn evaluate(&self, tape: &mut Tape, _feats: Var) -> Result<Var, AcqError> {
        Ok(tape.constant(Tensor::scalar(0.0)))
    }

    fn score(&self, seqs: &[TokenSequence], _feats: &Tensor) -> Result<f64, AcqError> {
        let batch: Vec<Vec<f64>> = seqs
            .iter()
            .map(|s| self.task.evaluate(s).unwrap())
            .collect();
        hypervolume_improvement(&self.observed, &batch, &self.reference)
    }
}

impl AcquisitionFactory for OracleImprovement<'_> {
    fn for_restart(
        &self,
        _rng: &mut dyn rand::RngCore,
        _batch: usize,
    ) -> Result<Box<dyn Acquisition + '_>, AcqError> {
        Ok(Box::new(OracleImprovement {
            task: self.task,
            observed: self.observed.clone(),
            reference: self.reference.clone(),
        }))
    }
}

#[test]
fn screening_keeps_the_best_restart() {
    let s = setup(18, 16);
    let acq = OracleImprovement {
        task: &s.task,
        observed: s.pool.objectives(),
        reference: s.pool.reference().to_vec(),
    };
    let cfg = mbga_config(lambo::lambo::LamboConfig {
        inner: InnerLoopConfig {
            restarts: 12,
            ..inner_cfg(4)
        },
        ..desk_scale(4)
    })
    .inner;
    assert_eq!(cfg.proposals, ProposalSource::Uniform);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let base = select_base_set(&s.pool, 4, 1.0, &mut rng);
    let seqs = s.pool.sequences();
    let bases: Vec<TokenSequence> = base.indices.iter().map(|&i| seqs[i].clone()).collect();
    let out = run_inner_loop(
        &bases,
        &base.weights,
        &s.dae,
        s.task.vocab(),
        &acq,
        &cfg,
        &mut rng,
    )
    .unwrap();
    let values: Vec<f64> = out.restarts.iter().map(|r| r.value).collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.value, max);
    assert_eq!(out.restart, values.iter().position(|&v| v == max).unwrap());
    assert_eq!(acq.score(&out.batch, &Tensor::zeros(&[1])).unwrap(), max);
    assert!(out.restarts.iter().all(|r| r.entropies.is_empty()));
}

fn run_nsga2(seed: u64, rounds: usize) -> (Vec<RoundRecord>, usize) {
    let task = BigramTask::new(Vocabulary::amino_acids());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = make_start_pool(&task, 16, &mut rng).unwrap();
    let mut ga = Nsga2::new(
        GaConfig {
            batch_size: 4,
            num_mutations: 1,
            tau: 1.0,
        },
        task.vocab().clone(),
    );
    let trace = run_outer_loop(&mut ga, &task, start, rounds, &mut rng, &mut |_| Ok(())).unwrap();
    assert_eq!(ga.population().len(), 4);
    (trace.records, trace.pool.len())
}

fn strip_time(mut r: Vec<RoundRecord>) -> Vec<RoundRecord> {
    for x in r.iter_mut() {
        x.wall_seconds = 0.0;
    }
    r
}

#[test]
fn nsga2_runs_are_reproducible() {
    let (a, n) = run_nsga2(20, 6);
    let (b, _) = run_nsga2(20, 6);
    assert_eq!(strip_time(a.clone()), strip_time(b));
    assert_eq!(n, 16 + 6 * 4);
    assert!(a
        .windows(2)
        .all(|w| w[1].relative_hypervolume >= w[0].relative_hypervolume));
    assert!(a
        .iter()
        .all(|r| r.proposal_entropy.is_none() && r.holdout_nll.is_none()));
    for (i, r) in a.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        assert_eq!(r.oracle_calls, 4 * (i + 1));
    }
}

#[test]
fn single_round_lambo() {
    let task = BigramTask::new(Vocabulary::amino_acids());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let start = make_start_pool(&task, 16, &mut rng).unwrap();
    let mut cfg = desk_scale(4);
    cfg.architecture = small_arch();
    cfg.fit.max_epochs = 2;
    cfg.inner = inner_cfg(4);
    let mut opt = Lambo::new(cfg, task.vocab().clone(), task.t_max(), 3, &mut rng);
    let mut seen = Vec::new();
    let trace = run_outer_loop(&mut opt, &task, start, 1, &mut rng, &mut |r| {
        seen.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(trace.records.len(), 1);
    assert_eq!(seen, trace.records);
    assert_eq!(trace.pool.len(), 20);
    let r = &trace.records[0];
    assert_eq!(r.oracle_calls, 4);
    assert!(r.relative_hypervolume >= 1.0);
    assert!(r.proposal_entropy.is_some());
    let vocab = task.vocab();
    let queried: Vec<TokenSequence> = trace.pool.sequences()[16..].to_vec();
    assert!(no_special(&queried, vocab));
}
