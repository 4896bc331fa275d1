//! Genetic baselines under the single-substitution mutation regime.

use std::cmp::Ordering;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dae::sample_proposals;
use crate::lambo::{
    restart_draw, select_base_set, CandidateRecord, Lambo, LamboConfig, LamboError, Optimizer,
    Pool, Proposal, ProposalSource,
};
use crate::pareto::dominates;
use crate::seq::{select_positions, TokenSequence, Vocabulary};

/// Partitions points into successive non-dominated fronts.
pub fn nondominated_sort<P: AsRef<[f64]>>(points: &[P]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominating: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (points[i].as_ref(), points[j].as_ref());
            if dominates(a, b).unwrap_or(false) {
                dominating[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(b, a).unwrap_or(false) {
                dominating[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominating[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each point within one front.
pub fn crowding_distance<P: AsRef<[f64]>>(front: &[P]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let k = front[0].as_ref().len();
    let mut dist = vec![0.0; n];
    for a in 0..k {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| front[i].as_ref()[a].total_cmp(&front[j].as_ref()[a]));
        let lo = front[order[0]].as_ref()[a];
        let hi = front[order[n - 1]].as_ref()[a];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        if hi == lo {
            continue;
        }
        for w in 1..n - 1 {
            let gap = front[order[w + 1]].as_ref()[a] - front[order[w - 1]].as_ref()[a];
            dist[order[w]] += gap / (hi - lo);
        }
    }
    dist
}

/// Front rank and crowding distance of every point.
fn rank_and_crowding(points: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let mut rank = vec![0; points.len()];
    let mut crowd = vec![0.0; points.len()];
    for (r, front) in nondominated_sort(points).into_iter().enumerate() {
        let members: Vec<&[f64]> = front.iter().map(|&i| points[i].as_slice()).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&members)) {
            rank[i] = r;
            crowd[i] = d;
        }
    }
    (rank, crowd)
}

fn crowded_cmp(rank: &[usize], crowd: &[f64], i: usize, j: usize) -> Ordering {
    rank[i]
        .cmp(&rank[j])
        .then(crowd[j].total_cmp(&crowd[i]))
        .then(i.cmp(&j))
}

/// The `n` best points by front rank, then crowding distance.
pub fn survivors(points: &[Vec<f64>], n: usize) -> Vec<usize> {
    let (rank, crowd) = rank_and_crowding(points);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| crowded_cmp(&rank, &crowd, i, j));
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Substitutes `num_mutations` uniformly chosen eligible positions with
/// uniformly chosen regular tokens other than the original.
pub fn uniform_mutation<R: Rng + ?Sized>(
    seq: &TokenSequence,
    num_mutations: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<TokenSequence, LamboError> {
    let plan = select_positions(seq, num_mutations, vocab, rng)?;
    let flat = vec![0.0; seq.t_max() * vocab.len()];
    Ok(sample_proposals(&flat, seq, &plan, vocab, rng)?)
}

#[derive(Debug, Clone)]
pub struct GaConfig {
    pub batch_size: usize,
    pub num_mutations: usize,
    pub tau: f64,
}

/// Round-synchronized NSGA-II: `b` offspring per round, elitist survivor
/// selection over parents and offspring.
pub struct Nsga2 {
    cfg: GaConfig,
    vocab: Vocabulary,
    population: Vec<CandidateRecord>,
}

impl Nsga2 {
    pub fn new(cfg: GaConfig, vocab: Vocabulary) -> Self {
        Self {
            cfg,
            vocab,
            population: Vec::new(),
        }
    }

    pub fn population(&self) -> &[CandidateRecord] {
        &self.population
    }

    fn select(&mut self, mut candidates: Vec<CandidateRecord>) {
        let objs: Vec<Vec<f64>> = candidates.iter().map(|r| r.objectives.clone()).collect();
        let keep = survivors(&objs, self.cfg.batch_size);
        let mut i = 0;
        candidates.retain(|_| {
            let k = keep.binary_search(&i).is_ok();
            i += 1;
            k
        });
        self.population = candidates;
    }
}

impl Optimizer for Nsga2 {
    fn propose(&mut self, pool: &Pool, rng: &mut ChaCha8Rng) -> Result<Proposal, LamboError> {
        if self.population.is_empty() {
            self.select(pool.records().to_vec());
        }
        let b = self.cfg.batch_size;
        let pop = Pool::new(self.population.clone())?;
        let base = select_base_set(&pop, b, self.cfg.tau, rng);
        let objs: Vec<Vec<f64>> = self
            .population
            .iter()
            .map(|r| r.objectives.clone())
            .collect();
        let (rank, crowd) = rank_and_crowding(&objs);
        let mut batch = Vec::with_capacity(b);
        for _ in 0..b {
            let pair = restart_draw(&base.weights, 2, rng);
            let (x, y) = (base.indices[pair[0]], base.indices[pair[1]]);
            let parent = match crowded_cmp(&rank, &crowd, x, y) {
                Ordering::Greater => y,
                _ => x,
            };
            batch.push(uniform_mutation(
                &self.population[parent].sequence,
                self.cfg.num_mutations,
                &self.vocab,
                rng,
            )?);
        }
        Ok(Proposal {
            batch,
            entropy: None,
            fit: None,
        })
    }

    fn observe(&mut self, labeled: &[CandidateRecord]) {
        let mut all = std::mem::take(&mut self.population);
        all.extend_from_slice(labeled);
        self.select(all);
    }
}

/// The model-based GA: uniform single-site mutants of base draws screened
/// by the acquisition, with no latent optimization.
pub fn mbga_config(mut cfg: LamboConfig) -> LamboConfig {
    cfg.inner.proposals = ProposalSource::Uniform;
    cfg.inner.steps = 0;
    cfg
}

/// Builds the model-based GA as a [`Lambo`] with frozen uniform proposals.
pub fn mbga<R: Rng + ?Sized>(
    cfg: LamboConfig,
    vocab: Vocabulary,
    t_max: usize,
    num_objectives: usize,
    rng: &mut R,
) -> Lambo {
    Lambo::new(mbga_config(cfg), vocab, t_max, num_objectives, rng)
}
