//! The optimizer: pool bookkeeping, rank-weighted base selection, the
//! latent-space inner loop and the round-based outer loop.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{
    reference_point, AcqError, Acquisition, AcquisitionFactory, NehviFactory, Normalizer,
    Scalarized,
};
use crate::dae::{
    plan_rows, proposal_entropy, sample_proposals, ArchitectureConfig, Batch, Dae, DaeError,
};
use crate::gp::{fit, FitConfig, FitReport, GpError, Mtgp, Surrogate};
use crate::pareto::{hypervolume, pareto_front, ParetoArchive, ParetoError};
use crate::seq::{
    apply_mask_corruption, select_positions, CorruptionPlan, SeqError, TokenSequence, Vocabulary,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LamboError {
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Dae(#[from] DaeError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Acq(#[from] AcqError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("oracle failed: {0}")]
    Oracle(String),
    #[error("the pool is empty")]
    EmptyPool,
    #[error("proposal contains a special token")]
    SpecialTokenInBatch,
}

/// A black-box objective, maximized.
pub trait Oracle: Sync {
    fn num_objectives(&self) -> usize;
    fn evaluate(&self, seq: &TokenSequence) -> Result<Vec<f64>, LamboError>;
}

/// A labeled sequence and the round it was queried in (0 for the start pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub sequence: TokenSequence,
    pub objectives: Vec<f64>,
    pub round: usize,
}

/// Every labeled sequence so far, with current and past Pareto membership.
#[derive(Debug, Clone)]
pub struct Pool {
    records: Vec<CandidateRecord>,
    current: Vec<bool>,
    ever: Vec<bool>,
    reference: Vec<f64>,
}

impl Pool {
    /// Starts a pool; the reference point is fixed from these records.
    pub fn new(start: Vec<CandidateRecord>) -> Result<Self, LamboError> {
        if start.is_empty() {
            return Err(LamboError::EmptyPool);
        }
        let objs: Vec<Vec<f64>> = start.iter().map(|r| r.objectives.clone()).collect();
        let reference = reference_point(&objs);
        let n = start.len();
        let mut pool = Self {
            records: start,
            current: vec![false; n],
            ever: vec![false; n],
            reference,
        };
        pool.refresh();
        Ok(pool)
    }

    fn refresh(&mut self) {
        let front = pareto_front(&self.objectives());
        self.current = vec![false; self.records.len()];
        for i in front {
            self.current[i] = true;
        }
    }

    /// Appends a round of queries; members of the outgoing front become
    /// historical Pareto members.
    pub fn extend(&mut self, records: Vec<CandidateRecord>) {
        for (e, &c) in self.ever.iter_mut().zip(&self.current) {
            *e |= c;
        }
        self.ever.extend(std::iter::repeat_n(false, records.len()));
        self.records.extend(records);
        self.refresh();
    }

    pub fn records(&self) -> &[CandidateRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sequences(&self) -> Vec<TokenSequence> {
        self.records.iter().map(|r| r.sequence.clone()).collect()
    }

    pub fn objectives(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.objectives.clone()).collect()
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn is_current_pareto(&self, i: usize) -> bool {
        self.current[i]
    }

    /// Was on the front after some earlier round but is not now.
    pub fn is_historical_pareto(&self, i: usize) -> bool {
        self.ever[i] && !self.current[i]
    }

    pub fn contains(&self, seq: &TokenSequence) -> bool {
        self.records.iter().any(|r| &r.sequence == seq)
    }
}

/// 0-indexed dense ranks with the largest value ranked 0.
pub fn dense_ranks(values: &[f64]) -> Vec<usize> {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    values
        .iter()
        .map(|v| distinct.partition_point(|d| d > v))
        .collect()
}

/// Sampling weights `softmax(-log(1 + r_max) / tau)`, where `r_max` is a
/// point's worst dense rank over the objectives.
pub fn rank_weights(objectives: &[Vec<f64>], tau: f64) -> Vec<f64> {
    let n = objectives.len();
    let k = objectives.first().map_or(0, Vec::len);
    let mut worst = vec![0usize; n];
    for a in 0..k {
        let col: Vec<f64> = objectives.iter().map(|r| r[a]).collect();
        for (w, r) in worst.iter_mut().zip(dense_ranks(&col)) {
            *w = (*w).max(r);
        }
    }
    let logits: Vec<f64> = worst
        .iter()
        .map(|&r| -((1 + r) as f64).ln() / tau)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Pool indices chosen as mutation starting points.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSet {
    pub indices: Vec<usize>,
    /// Sampling weights over `indices`, summing to one.
    pub weights: Vec<f64>,
    /// The pool was smaller than `b` and some members repeat.
    pub with_replacement: bool,
}

fn weighted_without_replacement<R: Rng + ?Sized>(
    candidates: &[usize],
    weights: &[f64],
    amount: usize,
    rng: &mut R,
) -> Vec<usize> {
    if amount >= candidates.len() {
        return candidates.to_vec();
    }
    let mut picked: Vec<usize> =
        index::sample_weighted(rng, candidates.len(), |i| weights[candidates[i]], amount)
            .expect("rank weights are positive")
            .into_iter()
            .map(|i| candidates[i])
            .collect();
    picked.sort_unstable();
    picked
}

/// Current Pareto members first, then historical Pareto members, then the
/// rest; each tier is sampled by rank weight when it overflows.
pub fn select_base_set<R: Rng + ?Sized>(pool: &Pool, b: usize, tau: f64, rng: &mut R) -> BaseSet {
    let w = rank_weights(&pool.objectives(), tau);
    let n = pool.len();
    let tiers: [Vec<usize>; 3] = [
        (0..n).filter(|&i| pool.is_current_pareto(i)).collect(),
        (0..n).filter(|&i| pool.is_historical_pareto(i)).collect(),
        (0..n)
            .filter(|&i| !pool.is_current_pareto(i) && !pool.is_historical_pareto(i))
            .collect(),
    ];
    let mut indices = Vec::with_capacity(b);
    for tier in &tiers {
        let need = b - indices.len();
        if need == 0 {
            break;
        }
        indices.extend(weighted_without_replacement(tier, &w, need, rng));
    }
    let with_replacement = indices.len() < b;
    if with_replacement {
        let dist = WeightedIndex::new(&w).expect("rank weights are positive");
        while indices.len() < b {
            indices.push(dist.sample(rng));
        }
    }
    let total: f64 = indices.iter().map(|&i| w[i]).sum();
    let weights = indices.iter().map(|&i| w[i] / total).collect();
    BaseSet {
        indices,
        weights,
        with_replacement,
    }
}

/// `b` independent weighted draws, with replacement, of positions into
/// the base set.
pub fn restart_draw<R: Rng + ?Sized>(weights: &[f64], b: usize, rng: &mut R) -> Vec<usize> {
    let dist = WeightedIndex::new(weights).expect("base weights are valid");
    (0..b).map(|_| dist.sample(rng)).collect()
}

/// Corrupts each base at `num_mutations` positions and encodes the result.
/// Returns the latent grid `[b, t, d]`, the plans and the corrupted batch.
pub fn init_latents<R: Rng + ?Sized>(
    bases: &[TokenSequence],
    dae: &Dae,
    vocab: &Vocabulary,
    num_mutations: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<CorruptionPlan>, Batch), LamboError> {
    let plans = bases
        .iter()
        .map(|s| select_positions(s, num_mutations, vocab, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let corrupted: Vec<TokenSequence> = bases
        .iter()
        .zip(&plans)
        .map(|(s, p)| apply_mask_corruption(s, p, vocab))
        .collect();
    let batch = Batch::new(&corrupted, vocab)?;
    let mut tape = Tape::new();
    let p = dae.bind(&mut tape, false);
    let z = dae.encode(&mut tape, &p, &batch)?;
    Ok((tape.value(z).clone(), plans, batch))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalSource {
    /// Sample replacements from the decoder.
    Dae,
    /// Sample replacements uniformly.
    Uniform,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InnerLoopConfig {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    pub entropy_weight: f64,
    pub batch_size: usize,
    pub num_mutations: usize,
    pub mc_samples: usize,
    pub tau: f64,
    pub proposals: ProposalSource,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        Self {
            restarts: 16,
            steps: 32,
            step_size: 0.1,
            entropy_weight: 1e-2,
            batch_size: 16,
            num_mutations: 1,
            mc_samples: 2,
            tau: 1.0,
            proposals: ProposalSource::Dae,
        }
    }
}

/// Terms of the latent objective `acq(w(Z)) - lambda * H[h(Z, w(Z))]`.
pub struct InnerObjective {
    pub objective: Var,
    pub acquisition: Var,
    pub entropy: Var,
    pub logits: Var,
}

/// Builds the regularized latent objective on `tape` for latents `z`.
pub fn inner_objective(
    tape: &mut Tape,
    dae: &Dae,
    z: Var,
    batch: &Batch,
    plans: &[CorruptionPlan],
    acq: &dyn Acquisition,
    entropy_weight: f64,
) -> Result<InnerObjective, LamboError> {
    let p = dae.bind(tape, false);
    let zp = dae.disc_encode(tape, &p, z, batch)?;
    let feats = dae.pool(tape, zp, batch)?;
    let acquisition = acq.evaluate(tape, feats)?;
    let logits = dae.mlm_logits(tape, &p, z, zp, batch)?;
    let entropy = proposal_entropy(tape, logits, &plan_rows(plans, batch.t))?;
    let penalty = tape.scale(entropy, -entropy_weight)?;
    let objective = tape.add(acquisition, penalty)?;
    Ok(InnerObjective {
        objective,
        acquisition,
        entropy,
        logits,
    })
}

/// Outcome of one restart.
#[derive(Debug, Clone)]
pub struct RestartResult {
    pub batch: Vec<TokenSequence>,
    pub value: f64,
    /// Best-so-far value after each step.
    pub best_trace: Vec<f64>,
    /// Mean decoder entropy at the corrupted positions per step; empty for
    /// uniform proposals.
    pub entropies: Vec<f64>,
}

/// Outcome of the inner loop.
#[derive(Debug, Clone)]
pub struct InnerLoopResult {
    pub batch: Vec<TokenSequence>,
    pub value: f64,
    pub restart: usize,
    pub restarts: Vec<RestartResult>,
}

impl InnerLoopResult {
    /// Mean decoder entropy over every restart and step.
    pub fn mean_entropy(&self) -> Option<f64> {
        let all: Vec<f64> = self
            .restarts
            .iter()
            .flat_map(|r| r.entropies.iter().copied())
            .collect();
        (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
    }
}

fn run_restart(
    bases: &[TokenSequence],
    weights: &[f64],
    dae: &Dae,
    vocab: &Vocabulary,
    factory: &dyn AcquisitionFactory,
    cfg: &InnerLoopConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RestartResult, LamboError> {
    let b = cfg.batch_size;
    let acq = factory.for_restart(rng, b)?;
    let draws: Vec<TokenSequence> = restart_draw(weights, b, rng)
        .into_iter()
        .map(|i| bases[i].clone())
        .collect();
    let (mut z, plans, batch) = init_latents(&draws, dae, vocab, cfg.num_mutations, rng)?;
    let (t, v) = (batch.t, vocab.len());
    let uniform = vec![0.0; t * v];

    let mut best: Option<(Vec<TokenSequence>, f64)> = None;
    let mut best_trace = Vec::with_capacity(cfg.steps + 1);
    let mut entropies = Vec::new();
    for j in 0..=cfg.steps {
        let step = j < cfg.steps && cfg.step_size != 0.0;
        let mut logits = None;
        let mut grad = None;
        if step || cfg.proposals == ProposalSource::Dae {
            let mut tape = Tape::new();
            let zv = if step {
                tape.leaf(z.clone())
            } else {
                tape.constant(z.clone())
            };
            let obj = if step {
                inner_objective(
                    &mut tape,
                    dae,
                    zv,
                    &batch,
                    &plans,
                    &*acq,
                    cfg.entropy_weight,
                )?
            } else {
                let p = dae.bind(&mut tape, false);
                let zp = dae.disc_encode(&mut tape, &p, zv, &batch)?;
                let logits = dae.mlm_logits(&mut tape, &p, zv, zp, &batch)?;
                let entropy = proposal_entropy(&mut tape, logits, &plan_rows(&plans, t))?;
                InnerObjective {
                    objective: entropy,
                    acquisition: entropy,
                    entropy,
                    logits,
                }
            };
            if cfg.proposals == ProposalSource::Dae {
                entropies.push(tape.value(obj.entropy).item());
            }
            logits = Some(tape.value(obj.logits).clone());
            if step {
                let g = tape.backward(obj.objective)?;
                grad = Some(g.get(zv));
            }
        }

        let proposals = draws
            .iter()
            .zip(&plans)
            .enumerate()
            .map(|(i, (base, plan))| {
                let row = match (&logits, cfg.proposals) {
                    (Some(l), ProposalSource::Dae) => &l.data()[i * t * v..(i + 1) * t * v],
                    _ => &uniform[..],
                };
                sample_proposals(row, base, plan, vocab, rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let feats = dae.features(&proposals, vocab)?;
        let value = acq.score(&proposals, &feats)?;
        if best.as_ref().is_none_or(|(_, bv)| value > *bv) {
            best = Some((proposals, value));
        }
        best_trace.push(best.as_ref().map_or(f64::NEG_INFINITY, |(_, bv)| *bv));

        if let Some(g) = grad {
            for (zi, gi) in z.data_mut().iter_mut().zip(g.data()) {
                *zi += cfg.step_size * gi;
            }
        }
    }
    let (batch, value) = best.expect("at least one step runs");
    Ok(RestartResult {
        batch,
        value,
        best_trace,
        entropies,
    })
}

/// Optimizes `restarts` batches in latent space and returns the best one.
///
/// Restarts run in parallel on independent streams derived from `rng`;
/// ties go to the lowest restart index.
pub fn run_inner_loop<R: Rng + ?Sized>(
    bases: &[TokenSequence],
    weights: &[f64],
    dae: &Dae,
    vocab: &Vocabulary,
    factory: &dyn AcquisitionFactory,
    cfg: &InnerLoopConfig,
    rng: &mut R,
) -> Result<InnerLoopResult, LamboError> {
    let seed: u64 = rng.random();
    let restarts = (0..cfg.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut stream = ChaCha8Rng::seed_from_u64(seed);
            stream.set_stream(r as u64);
            run_restart(bases, weights, dae, vocab, factory, cfg, &mut stream)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut pick = 0;
    for (r, res) in restarts.iter().enumerate() {
        if res.value > restarts[pick].value {
            pick = r;
        }
    }
    let out = &restarts[pick];
    if out
        .batch
        .iter()
        .any(|s| s.ids()[..s.len(vocab)].iter().any(|&i| vocab.is_special(i)))
    {
        return Err(LamboError::SpecialTokenInBatch);
    }
    Ok(InnerLoopResult {
        batch: out.batch.clone(),
        value: out.value,
        restart: pick,
        restarts,
    })
}

/// What an optimizer proposes for one round.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub batch: Vec<TokenSequence>,
    pub entropy: Option<f64>,
    pub fit: Option<FitReport>,
}

/// A round-synchronized batch optimizer.
pub trait Optimizer {
    fn propose(&mut self, pool: &Pool, rng: &mut ChaCha8Rng) -> Result<Proposal, LamboError>;

    /// Called with the labeled queries after each round.
    fn observe(&mut self, _labeled: &[CandidateRecord]) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionKind {
    Nehvi,
    Scalarized,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LamboConfig {
    pub architecture: ArchitectureConfig,
    pub fit: FitConfig,
    pub inner: InnerLoopConfig,
    pub acquisition: AcquisitionKind,
}

/// LaMBO with a surrogate that is warm-started from round to round.
pub struct Lambo {
    cfg: LamboConfig,
    vocab: Vocabulary,
    dae: Dae,
    gp: Mtgp,
}

impl Lambo {
    pub fn new<R: Rng + ?Sized>(
        cfg: LamboConfig,
        vocab: Vocabulary,
        t_max: usize,
        num_objectives: usize,
        rng: &mut R,
    ) -> Self {
        let dae = Dae::new(cfg.architecture, vocab.len(), t_max, rng);
        Self {
            cfg,
            vocab,
            dae,
            gp: Mtgp::new(num_objectives),
        }
    }

    pub fn config(&self) -> &LamboConfig {
        &self.cfg
    }

    pub fn dae(&self) -> &Dae {
        &self.dae
    }

    pub fn gp(&self) -> &Mtgp {
        &self.gp
    }
}

impl Optimizer for Lambo {
    fn propose(&mut self, pool: &Pool, rng: &mut ChaCha8Rng) -> Result<Proposal, LamboError> {
        let seqs = pool.sequences();
        let y = pool.objectives();
        let report = fit(
            &mut self.dae,
            &mut self.gp,
            &self.vocab,
            &seqs,
            &y,
            &self.cfg.fit,
            rng,
        )?;
        let surrogate = Surrogate::new(
            self.dae.clone(),
            self.gp.clone(),
            self.vocab.clone(),
            &seqs,
            &y,
        )?;
        let inner = &self.cfg.inner;
        let base = select_base_set(pool, inner.batch_size, inner.tau, rng);
        let bases: Vec<TokenSequence> = base.indices.iter().map(|&i| seqs[i].clone()).collect();
        let result = match self.cfg.acquisition {
            AcquisitionKind::Nehvi => {
                let cond = surrogate.exact().conditioning()?;
                let factory = NehviFactory::new(
                    surrogate.exact(),
                    &cond,
                    pool.reference().to_vec(),
                    inner.mc_samples,
                );
                run_inner_loop(
                    &bases,
                    &base.weights,
                    surrogate.dae(),
                    &self.vocab,
                    &factory,
                    inner,
                    rng,
                )?
            }
            AcquisitionKind::Scalarized => {
                let factory = Scalarized {
                    model: surrogate.exact().clone(),
                    normalizer: Normalizer::from_pool(&y),
                };
                run_inner_loop(
                    &bases,
                    &base.weights,
                    surrogate.dae(),
                    &self.vocab,
                    &factory,
                    inner,
                    rng,
                )?
            }
        };
        Ok(Proposal {
            entropy: result.mean_entropy(),
            batch: result.batch,
            fit: Some(report),
        })
    }
}

/// Metrics after one round of queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Online oracle calls so far, excluding the start pool.
    pub oracle_calls: usize,
    pub relative_hypervolume: f64,
    pub hypervolume: f64,
    pub archive_size: usize,
    pub proposal_entropy: Option<f64>,
    pub holdout_nll: Option<f64>,
    pub holdout_spearman: Vec<f64>,
    /// Queries that repeat a pool member or another query in the batch.
    pub duplicates: usize,
    pub wall_seconds: f64,
}

/// Final state of a run.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub records: Vec<RoundRecord>,
    pub pool: Pool,
    pub archive: ParetoArchive<TokenSequence>,
    pub start_hypervolume: f64,
}

/// Runs `rounds` query rounds from `start`, calling `on_round` after each.
pub fn run_outer_loop(
    optimizer: &mut dyn Optimizer,
    oracle: &dyn Oracle,
    start: Vec<CandidateRecord>,
    rounds: usize,
    rng: &mut ChaCha8Rng,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<(), LamboError>,
) -> Result<RunTrace, LamboError> {
    let mut pool = Pool::new(start)?;
    let mut archive = ParetoArchive::new(pool.reference().to_vec());
    for r in pool.records() {
        archive.insert(r.objectives.clone(), r.sequence.clone())?;
    }
    let start_hypervolume = hypervolume(&pool.objectives(), pool.reference())?;
    let mut records = Vec::with_capacity(rounds);
    let mut calls = 0;
    for round in 1..=rounds {
        let clock = Instant::now();
        let proposal = optimizer.propose(&pool, rng)?;
        let mut duplicates = 0;
        for (i, s) in proposal.batch.iter().enumerate() {
            if pool.contains(s) || proposal.batch[..i].contains(s) {
                duplicates += 1;
            }
        }
        let labeled = proposal
            .batch
            .iter()
            .map(|s| {
                Ok(CandidateRecord {
                    sequence: s.clone(),
                    objectives: oracle.evaluate(s)?,
                    round,
                })
            })
            .collect::<Result<Vec<_>, LamboError>>()?;
        calls += labeled.len();
        for r in &labeled {
            archive.insert(r.objectives.clone(), r.sequence.clone())?;
        }
        optimizer.observe(&labeled);
        pool.extend(labeled);
        let record = RoundRecord {
            round,
            oracle_calls: calls,
            relative_hypervolume: archive.hypervolume() / start_hypervolume,
            hypervolume: archive.hypervolume(),
            archive_size: archive.len(),
            proposal_entropy: proposal.entropy,
            holdout_nll: proposal
                .fit
                .as_ref()
                .map(|f| f.holdout_nll)
                .filter(|v| v.is_finite()),
            holdout_spearman: proposal.fit.map(|f| f.holdout_spearman).unwrap_or_default(),
            duplicates,
            wall_seconds: clock.elapsed().as_secs_f64(),
        };
        on_round(&record)?;
        records.push(record);
    }
    Ok(RunTrace {
        records,
        pool,
        archive,
        start_hypervolume,
    })
}
