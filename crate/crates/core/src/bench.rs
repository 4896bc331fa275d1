//! The Bigrams task, start pools, run metrics and the experiment harness.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::reference_point;
use crate::baselines::{mbga_config, GaConfig, Nsga2};
use crate::dae::ArchitectureConfig;
use crate::gp::FitConfig;
use crate::lambo::{
    run_outer_loop, AcquisitionKind, CandidateRecord, InnerLoopConfig, Lambo, LamboConfig,
    LamboError, Optimizer, Oracle, RoundRecord, RunTrace,
};
use crate::pareto::hypervolume;
use crate::seq::{detokenize, TokenId, TokenSequence, Vocabulary};

pub const BIGRAMS: [&str; 3] = ["AV", "VC", "CA"];
pub const MIN_LENGTH: usize = 32;
pub const MAX_LENGTH: usize = 36;
/// Version of the trace CSV layout, recorded in `config.json`.
pub const TRACE_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Lambo(#[from] LamboError),
    #[error("sequence contains a masking token")]
    ContainsMask,
    #[error("could not draw a balanced start pool within {0} attempts")]
    SamplingBudgetExceeded(usize),
    #[error("start pool has zero hypervolume")]
    ZeroStartVolume,
    #[error("start pool size must be even, got {0}")]
    OddPoolSize(usize),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0} of {1} cells failed")]
    CellsFailed(usize, usize),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Counts overlapping occurrences of three target bigrams.
#[derive(Debug, Clone)]
pub struct BigramTask {
    vocab: Vocabulary,
    targets: Vec<(TokenId, TokenId)>,
}

impl BigramTask {
    pub fn new(vocab: Vocabulary) -> Self {
        let targets = BIGRAMS
            .iter()
            .map(|b| {
                let (x, y) = b.split_at(1);
                (
                    vocab.id(x).expect("bigram letters are in the vocabulary"),
                    vocab.id(y).expect("bigram letters are in the vocabulary"),
                )
            })
            .collect();
        Self { vocab, targets }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Padded length of every sequence.
    pub fn t_max(&self) -> usize {
        MAX_LENGTH
    }

    pub fn counts(&self, seq: &TokenSequence) -> Result<Vec<f64>, BenchError> {
        if seq.contains_mask(&self.vocab) {
            return Err(BenchError::ContainsMask);
        }
        let ids = &seq.ids()[..seq.len(&self.vocab)];
        Ok(self
            .targets
            .iter()
            .map(|&(a, b)| ids.windows(2).filter(|w| w[0] == a && w[1] == b).count() as f64)
            .collect())
    }

    fn random_sequence<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSequence {
        let regular = self.vocab.regular_ids();
        let len = rng.random_range(MIN_LENGTH..=MAX_LENGTH);
        let mut ids: Vec<TokenId> = (0..len)
            .map(|_| regular[rng.random_range(0..regular.len())])
            .collect();
        ids.resize(MAX_LENGTH, self.vocab.padding_id());
        TokenSequence::from_ids(ids, &self.vocab).expect("random sequence is well formed")
    }
}

impl Oracle for BigramTask {
    fn num_objectives(&self) -> usize {
        self.targets.len()
    }

    fn evaluate(&self, seq: &TokenSequence) -> Result<Vec<f64>, LamboError> {
        self.counts(seq)
            .map_err(|e| LamboError::Oracle(e.to_string()))
    }
}

/// `n` random labeled sequences, half containing at least one target bigram.
pub fn make_start_pool<R: Rng + ?Sized>(
    task: &BigramTask,
    n: usize,
    rng: &mut R,
) -> Result<Vec<CandidateRecord>, BenchError> {
    if n % 2 != 0 {
        return Err(BenchError::OddPoolSize(n));
    }
    let budget = 1000 * n.max(1);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for _ in 0..budget {
        if pos.len() == n / 2 && neg.len() == n / 2 {
            break;
        }
        let sequence = task.random_sequence(rng);
        let objectives = task.counts(&sequence)?;
        let bucket = if objectives.iter().any(|&c| c > 0.0) {
            &mut pos
        } else {
            &mut neg
        };
        if bucket.len() < n / 2 {
            bucket.push(CandidateRecord {
                sequence,
                objectives,
                round: 0,
            });
        }
    }
    if pos.len() < n / 2 || neg.len() < n / 2 {
        return Err(BenchError::SamplingBudgetExceeded(budget));
    }
    // interleave so the pool order carries no label information
    Ok(pos.into_iter().zip(neg).flat_map(|(p, q)| [p, q]).collect())
}

pub fn relative_hypervolume(hv: f64, start_hv: f64) -> Result<f64, BenchError> {
    if start_hv <= 0.0 {
        return Err(BenchError::ZeroStartVolume);
    }
    Ok(hv / start_hv)
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Formats with 9 significant digits, dropping trailing zeros.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.8e}");
    let (mant, exp) = s.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed
                .trim_end_matches('0')
                .trim_end_matches('.')
                .to_string()
        } else {
            fixed
        }
    } else {
        let mant = mant.trim_end_matches('0').trim_end_matches('.');
        format!("{mant}e{exp}")
    }
}

fn round9(x: f64) -> f64 {
    sig9(x).parse().unwrap_or(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerId {
    Lambo,
    Nsga2,
    Mbga,
    LamboScalarized,
    LamboUniformProposals,
    LamboNoEntropy,
    LamboDaeProposals,
}

impl OptimizerId {
    pub const ALL: [OptimizerId; 7] = [
        OptimizerId::Lambo,
        OptimizerId::Nsga2,
        OptimizerId::Mbga,
        OptimizerId::LamboScalarized,
        OptimizerId::LamboUniformProposals,
        OptimizerId::LamboNoEntropy,
        OptimizerId::LamboDaeProposals,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerId::Lambo => "lambo",
            OptimizerId::Nsga2 => "nsga2",
            OptimizerId::Mbga => "mbga",
            OptimizerId::LamboScalarized => "lambo-scalarized",
            OptimizerId::LamboUniformProposals => "lambo-uniform-proposals",
            OptimizerId::LamboNoEntropy => "lambo-no-entropy",
            OptimizerId::LamboDaeProposals => "lambo-dae-proposals",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    /// The LaMBO configuration this id runs, or `None` for NSGA-II.
    pub fn lambo_config(self, base: &LamboConfig) -> Option<LamboConfig> {
        let mut cfg = base.clone();
        match self {
            OptimizerId::Nsga2 => return None,
            OptimizerId::Lambo => {}
            OptimizerId::Mbga | OptimizerId::LamboUniformProposals => cfg = mbga_config(cfg),
            OptimizerId::LamboScalarized => cfg.acquisition = AcquisitionKind::Scalarized,
            OptimizerId::LamboNoEntropy => cfg.inner.entropy_weight = 0.0,
            OptimizerId::LamboDaeProposals => cfg.inner.steps = 0,
        }
        Some(cfg)
    }
}

/// Model and inner-loop settings for a laptop-sized run.
pub fn desk_scale(batch_size: usize) -> LamboConfig {
    LamboConfig {
        architecture: ArchitectureConfig {
            kernel_width: 5,
            channels: 16,
            latent_dim: 8,
            shared_encoder_blocks: 2,
            disc_encoder_blocks: 1,
            decoder_blocks: 1,
        },
        fit: FitConfig {
            lr: 5e-3,
            patience: 8,
            max_epochs: 32,
            ..FitConfig::default()
        },
        inner: InnerLoopConfig {
            restarts: 4,
            steps: 8,
            batch_size,
            ..InnerLoopConfig::default()
        },
        acquisition: AcquisitionKind::Nehvi,
    }
}

/// Settings from the reference hyperparameter table.
pub fn full_scale(batch_size: usize) -> LamboConfig {
    LamboConfig {
        architecture: ArchitectureConfig::default(),
        fit: FitConfig::default(),
        inner: InnerLoopConfig {
            batch_size,
            ..InnerLoopConfig::default()
        },
        acquisition: AcquisitionKind::Nehvi,
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: String,
    pub optimizers: Vec<OptimizerId>,
    pub seeds: Vec<u64>,
    pub start_pool: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub desk_scale: bool,
    pub lambo: LamboConfig,
    pub trace_schema: u32,
}

impl ExperimentConfig {
    pub fn new(
        optimizers: Vec<OptimizerId>,
        seeds: Vec<u64>,
        start_pool: usize,
        batch_size: usize,
        rounds: usize,
        desk: bool,
    ) -> Self {
        let lambo = if desk {
            desk_scale(batch_size)
        } else {
            full_scale(batch_size)
        };
        Self {
            task: "bigrams".into(),
            optimizers,
            seeds,
            start_pool,
            batch_size,
            rounds,
            desk_scale: desk,
            lambo,
            trace_schema: TRACE_SCHEMA,
        }
    }
}

/// Result of one (optimizer, seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub optimizer: OptimizerId,
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    pub start_hypervolume: f64,
    pub error: Option<String>,
}

/// All cells of an experiment, in (optimizer, seed) order.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
}

impl ExperimentResult {
    pub fn cell(&self, optimizer: OptimizerId, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.optimizer == optimizer && c.seed == seed)
    }

    /// Final relative hypervolume per seed, in seed order.
    pub fn final_relative_hv(&self, optimizer: OptimizerId) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.optimizer == optimizer)
            .filter_map(|c| c.records.last().map(|r| r.relative_hypervolume))
            .collect()
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }
}

fn trace_header(k: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "round",
        "oracle_calls",
        "relative_hypervolume",
        "hypervolume",
        "archive_size",
        "proposal_entropy",
        "holdout_nll",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..k).map(|a| format!("spearman_{a}")));
    h.push("duplicates".into());
    h
}

fn trace_row(r: &RoundRecord, k: usize) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
    let mut row = vec![
        r.round.to_string(),
        r.oracle_calls.to_string(),
        sig9(r.relative_hypervolume),
        sig9(r.hypervolume),
        r.archive_size.to_string(),
        opt(r.proposal_entropy),
        opt(r.holdout_nll),
    ];
    row.extend((0..k).map(|a| opt(r.holdout_spearman.get(a).copied())));
    row.push(r.duplicates.to_string());
    row
}

#[derive(Serialize)]
struct ArchiveMember {
    sequence: String,
    objectives: Vec<f64>,
    round: usize,
}

#[derive(Serialize)]
struct ArchiveDump {
    reference: Vec<f64>,
    start_hypervolume: f64,
    hypervolume: f64,
    members: Vec<ArchiveMember>,
}

fn write_archive(path: &Path, trace: &RunTrace, vocab: &Vocabulary) -> Result<(), BenchError> {
    let round_of = |s: &TokenSequence| {
        trace
            .pool
            .records()
            .iter()
            .find(|r| &r.sequence == s)
            .map_or(0, |r| r.round)
    };
    let mut members: Vec<ArchiveMember> = trace
        .archive
        .members()
        .iter()
        .map(|(o, s)| {
            Ok(ArchiveMember {
                sequence: detokenize(s, vocab).map_err(LamboError::from)?,
                objectives: o.iter().copied().map(round9).collect(),
                round: round_of(s),
            })
        })
        .collect::<Result<_, BenchError>>()?;
    members.sort_by(|a, b| a.sequence.cmp(&b.sequence));
    let dump = ArchiveDump {
        reference: trace
            .archive
            .reference()
            .iter()
            .copied()
            .map(round9)
            .collect(),
        start_hypervolume: round9(trace.start_hypervolume),
        hypervolume: round9(trace.archive.hypervolume()),
        members,
    };
    let f = File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &dump)?;
    Ok(())
}

fn build_optimizer(
    id: OptimizerId,
    cfg: &ExperimentConfig,
    task: &BigramTask,
    rng: &mut ChaCha8Rng,
) -> Box<dyn Optimizer> {
    match id.lambo_config(&cfg.lambo) {
        Some(lc) => Box::new(Lambo::new(
            lc,
            task.vocab().clone(),
            task.t_max(),
            task.num_objectives(),
            rng,
        )),
        None => Box::new(Nsga2::new(
            GaConfig {
                batch_size: cfg.batch_size,
                num_mutations: cfg.lambo.inner.num_mutations,
                tau: cfg.lambo.inner.tau,
            },
            task.vocab().clone(),
        )),
    }
}

/// Seed-determined start pool, shared by every optimizer.
pub fn start_pool_for_seed(
    task: &BigramTask,
    n: usize,
    seed: u64,
) -> Result<Vec<CandidateRecord>, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_start_pool(task, n, &mut rng)
}

fn run_cell(
    id: OptimizerId,
    seed: u64,
    cfg: &ExperimentConfig,
    task: &BigramTask,
    out: Option<&Path>,
) -> Result<(Vec<RoundRecord>, f64), BenchError> {
    let start = start_pool_for_seed(task, cfg.start_pool, seed)?;
    let objs: Vec<Vec<f64>> = start.iter().map(|r| r.objectives.clone()).collect();
    let start_hv = hypervolume(&objs, &reference_point(&objs)).map_err(LamboError::from)?;
    if start_hv <= 0.0 {
        return Err(BenchError::ZeroStartVolume);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut optimizer = build_optimizer(id, cfg, task, &mut rng);
    let k = task.num_objectives();

    let mut writer = None;
    let mut timing = None;
    if let Some(dir) = out {
        let d = dir.join(id.name());
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        let mut w = csv::Writer::from_path(d.join(format!("trace_seed{seed}.csv")))?;
        w.write_record(trace_header(k))?;
        w.flush().map_err(io_err(&d))?;
        writer = Some(w);
        let mut t = csv::Writer::from_path(d.join(format!("timing_seed{seed}.csv")))?;
        t.write_record(["round", "wall_seconds"])?;
        timing = Some(t);
    }
    let mut on_round = |r: &RoundRecord| -> Result<(), LamboError> {
        let io = |e: csv::Error| LamboError::Oracle(format!("writing trace: {e}"));
        if let Some(w) = writer.as_mut() {
            w.write_record(trace_row(r, k)).map_err(io)?;
            w.flush()
                .map_err(|e| LamboError::Oracle(format!("writing trace: {e}")))?;
        }
        if let Some(t) = timing.as_mut() {
            t.write_record([r.round.to_string(), format!("{:.3}", r.wall_seconds)])
                .map_err(io)?;
            t.flush()
                .map_err(|e| LamboError::Oracle(format!("writing timing: {e}")))?;
        }
        Ok(())
    };
    let trace = run_outer_loop(
        optimizer.as_mut(),
        task,
        start,
        cfg.rounds,
        &mut rng,
        &mut on_round,
    )?;
    if let Some(dir) = out {
        let p = dir.join(id.name()).join(format!("archive_seed{seed}.json"));
        write_archive(&p, &trace, task.vocab())?;
    }
    Ok((trace.records, trace.start_hypervolume))
}

const AGGREGATE_METRICS: [&str; 3] = ["relative_hypervolume", "hypervolume", "proposal_entropy"];

fn metric(r: &RoundRecord, name: &str) -> Option<f64> {
    match name {
        "relative_hypervolume" => Some(r.relative_hypervolume),
        "hypervolume" => Some(r.hypervolume),
        "proposal_entropy" => r.proposal_entropy,
        _ => None,
    }
}

fn write_aggregate(
    path: &Path,
    result: &ExperimentResult,
    cfg: &ExperimentConfig,
) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "optimizer",
        "round",
        "oracle_calls",
        "metric",
        "q20",
        "q50",
        "q80",
    ])?;
    for &id in &cfg.optimizers {
        for round in 1..=cfg.rounds {
            for name in AGGREGATE_METRICS {
                let vals: Vec<f64> = result
                    .cells
                    .iter()
                    .filter(|c| c.optimizer == id)
                    .filter_map(|c| c.records.get(round - 1))
                    .filter_map(|r| metric(r, name))
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                w.write_record([
                    id.name().to_string(),
                    round.to_string(),
                    (round * cfg.batch_size).to_string(),
                    name.to_string(),
                    sig9(quantile(&vals, 0.2)),
                    sig9(quantile(&vals, 0.5)),
                    sig9(quantile(&vals, 0.8)),
                ])?;
            }
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Runs every (optimizer, seed) cell, writing results under `out` when
/// given. Cells run in parallel; a failing cell keeps its partial trace.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<ExperimentResult, BenchError> {
    if cfg.task != "bigrams" {
        return Err(BenchError::UnknownTask(cfg.task.clone()));
    }
    let task = BigramTask::new(Vocabulary::amino_acids());
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("config.json");
        let f = File::create(&p).map_err(io_err(&p))?;
        serde_json::to_writer_pretty(BufWriter::new(f), cfg)?;
    }
    let cells: Vec<(OptimizerId, u64)> = cfg
        .optimizers
        .iter()
        .flat_map(|&o| cfg.seeds.iter().map(move |&s| (o, s)))
        .collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(
            |&(optimizer, seed)| match run_cell(optimizer, seed, cfg, &task, out) {
                Ok((records, start_hypervolume)) => CellResult {
                    optimizer,
                    seed,
                    records,
                    start_hypervolume,
                    error: None,
                },
                Err(e) => CellResult {
                    optimizer,
                    seed,
                    records: Vec::new(),
                    start_hypervolume: f64::NAN,
                    error: Some(e.to_string()),
                },
            },
        )
        .collect();
    let result = ExperimentResult { cells: results };
    if let Some(dir) = out {
        write_aggregate(&dir.join("aggregate.csv"), &result, cfg)?;
    }
    Ok(result)
}
