//! Batch acquisition functions on pooled candidate features.
//!
//! [`Nehvi`] is the Monte-Carlo noisy expected hypervolume improvement of a
//! whole batch, with candidate samples drawn jointly with posterior samples
//! of the already observed points. [`Scalarized`] averages min-max
//! normalized posterior means. Both are differentiable in the features, so
//! gradients reach the latent grid through the discriminative encoder.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::gp::{cholesky_on_tape, BaselineConditioning, ExactGp, GpError};
use crate::pareto::{hypervolume, pareto_front, ParetoError};
use crate::seq::TokenSequence;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcqError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error("expected {expected} candidates, got {got}")]
    BatchSize { expected: usize, got: usize },
}

/// A batch utility, maximized by the optimizer.
pub trait Acquisition {
    /// Value of the batch whose pooled features `[b, d]` are `feats`.
    fn evaluate(&self, tape: &mut Tape, feats: Var) -> Result<Var, AcqError>;

    /// Value of a concrete batch; defaults to [`Acquisition::evaluate`]
    /// without gradients.
    fn score(&self, _seqs: &[TokenSequence], feats: &Tensor) -> Result<f64, AcqError> {
        let mut tape = Tape::new();
        let f = tape.constant(feats.clone());
        let v = self.evaluate(&mut tape, f)?;
        Ok(tape.value(v).item())
    }
}

/// Builds one acquisition per inner-loop restart, so Monte-Carlo draws stay
/// fixed within a restart.
pub trait AcquisitionFactory: Sync {
    fn for_restart(
        &self,
        rng: &mut dyn rand::RngCore,
        batch: usize,
    ) -> Result<Box<dyn Acquisition + '_>, AcqError>;
}

/// Always `c`; has no gradient.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Acquisition for Constant {
    fn evaluate(&self, tape: &mut Tape, _feats: Var) -> Result<Var, AcqError> {
        Ok(tape.constant(Tensor::scalar(self.0)))
    }
}

impl AcquisitionFactory for Constant {
    fn for_restart(
        &self,
        _rng: &mut dyn rand::RngCore,
        _batch: usize,
    ) -> Result<Box<dyn Acquisition + '_>, AcqError> {
        Ok(Box::new(*self))
    }
}

/// Posterior mean of candidate objectives as a function of features.
pub trait MeanModel {
    fn num_tasks(&self) -> usize;
    /// `[m, k]` means for candidate features `[m, d]`.
    fn mean(&self, tape: &mut Tape, feats: Var) -> Result<Var, AcqError>;
}

impl MeanModel for ExactGp {
    fn num_tasks(&self) -> usize {
        ExactGp::num_tasks(self)
    }

    fn mean(&self, tape: &mut Tape, feats: Var) -> Result<Var, AcqError> {
        Ok(self.mean_on_tape(tape, feats)?)
    }
}

/// Candidate posteriors conditioned on `S` joint draws at the observed points.
pub trait JointModel {
    fn num_tasks(&self) -> usize;
    fn num_draws(&self) -> usize;
    /// Objective values of the observed points under draw `s`.
    fn baseline(&self, s: usize) -> &[Vec<f64>];
    /// Candidate mean `[m, k]` and covariance `[m * k, m * k]` under draw `s`.
    fn candidates(&self, tape: &mut Tape, feats: Var, s: usize) -> Result<(Var, Var), AcqError>;
}

/// [`JointModel`] backed by an exact GP and fixed standard normal draws.
pub struct GpJoint<'a> {
    exact: &'a ExactGp,
    cond: &'a BaselineConditioning,
    draws: Vec<(Vec<Vec<f64>>, Tensor)>,
}

impl<'a> GpJoint<'a> {
    /// `eps` is `[S, n * k]`.
    pub fn new(
        exact: &'a ExactGp,
        cond: &'a BaselineConditioning,
        eps: &Tensor,
    ) -> Result<Self, AcqError> {
        let (s, _) = eps.dims2();
        let draws = (0..s)
            .map(|r| exact.baseline_draw(cond, eps.row(r)))
            .collect::<Result<_, _>>()?;
        Ok(Self { exact, cond, draws })
    }
}

impl JointModel for GpJoint<'_> {
    fn num_tasks(&self) -> usize {
        self.exact.num_tasks()
    }

    fn num_draws(&self) -> usize {
        self.draws.len()
    }

    fn baseline(&self, s: usize) -> &[Vec<f64>] {
        &self.draws[s].0
    }

    fn candidates(&self, tape: &mut Tape, feats: Var, s: usize) -> Result<(Var, Var), AcqError> {
        Ok(self
            .exact
            .conditional_on_tape(tape, self.cond, feats, &self.draws[s].1)?)
    }
}

/// Zero-variance model whose candidate objectives are the features
/// themselves, against a fixed set of observed objectives.
#[derive(Debug, Clone)]
pub struct Deterministic {
    pub observed: Vec<Vec<f64>>,
    pub k: usize,
}

impl JointModel for Deterministic {
    fn num_tasks(&self) -> usize {
        self.k
    }

    fn num_draws(&self) -> usize {
        1
    }

    fn baseline(&self, _s: usize) -> &[Vec<f64>] {
        &self.observed
    }

    fn candidates(&self, tape: &mut Tape, feats: Var, _s: usize) -> Result<(Var, Var), AcqError> {
        let m = tape.shape(feats)[0];
        let mk = m * self.k;
        Ok((feats, tape.constant(Tensor::zeros(&[mk, mk]))))
    }
}

impl MeanModel for Deterministic {
    fn num_tasks(&self) -> usize {
        self.k
    }

    fn mean(&self, _tape: &mut Tape, feats: Var) -> Result<Var, AcqError> {
        Ok(feats)
    }
}

/// Monte-Carlo NEHVI of a batch of `batch` candidates.
pub struct Nehvi<M> {
    model: M,
    reference: Vec<f64>,
    fronts: Vec<Vec<Vec<f64>>>,
    front_hv: Vec<f64>,
    draws: Tensor,
}

impl<M: JointModel> Nehvi<M> {
    /// `draws` is `[S, batch * k]` with one row per draw of `model`.
    pub fn new(model: M, reference: Vec<f64>, draws: Tensor) -> Result<Self, AcqError> {
        let s = model.num_draws();
        if draws.shape().len() != 2 || draws.shape()[0] != s {
            return Err(TensorError::ShapeMismatch {
                op: "nehvi",
                detail: format!("{s} model draws, base draws {:?}", draws.shape()),
            }
            .into());
        }
        let mut fronts = Vec::with_capacity(s);
        let mut front_hv = Vec::with_capacity(s);
        for r in 0..s {
            let base = model.baseline(r);
            let front: Vec<Vec<f64>> = pareto_front(base)
                .into_iter()
                .map(|i| base[i].clone())
                .collect();
            front_hv.push(hypervolume(&front, &reference)?);
            fronts.push(front);
        }
        Ok(Self {
            model,
            reference,
            fronts,
            front_hv,
            draws,
        })
    }

    /// Standard normal base draws for `s` samples of a `batch`-candidate batch.
    pub fn standard_draws<R: Rng + ?Sized>(
        s: usize,
        batch: usize,
        k: usize,
        rng: &mut R,
    ) -> Tensor {
        Tensor::from_fn(s, batch * k, |_, _| StandardNormal.sample(rng))
    }

    pub fn model(&self) -> &M {
        &self.model
    }
}

impl<M: JointModel> Acquisition for Nehvi<M> {
    fn evaluate(&self, tape: &mut Tape, feats: Var) -> Result<Var, AcqError> {
        let k = self.model.num_tasks();
        let m = tape.shape(feats)[0];
        let (s, cols) = self.draws.dims2();
        if cols != m * k {
            return Err(AcqError::BatchSize {
                expected: cols / k.max(1),
                got: m,
            });
        }
        let mut total: Option<Var> = None;
        for r in 0..s {
            let (mean, cov) = self.model.candidates(tape, feats, r)?;
            let sample = if tape.value(cov).data().iter().all(|&v| v == 0.0) {
                mean
            } else {
                let l = cholesky_on_tape(tape, cov)?;
                let eps = tape.constant(Tensor::new(vec![m * k, 1], self.draws.row(r).to_vec())?);
                let corr = tape.matmul(l, eps)?;
                let corr = tape.reshape(corr, &[m, k])?;
                tape.add(mean, corr)?
            };
            let pts = if self.fronts[r].is_empty() {
                sample
            } else {
                let front = &self.fronts[r];
                let f = Tensor::matrix(front.len(), k, front.concat())?;
                let f = tape.constant(f);
                tape.concat_rows(f, sample)?
            };
            let hv = tape.hypervolume(pts, &self.reference)?;
            let gain = tape.add_scalar(hv, -self.front_hv[r])?;
            total = Some(match total {
                None => gain,
                Some(t) => tape.add(t, gain)?,
            });
        }
        let total = total.ok_or(AcqError::BatchSize {
            expected: 1,
            got: 0,
        })?;
        Ok(tape.scale(total, 1.0 / s as f64)?)
    }
}

/// Builds a [`Nehvi`] per restart from an exact GP, with fresh base draws
/// for both the observed points and the candidates.
pub struct NehviFactory<'a> {
    pub exact: &'a ExactGp,
    pub cond: &'a BaselineConditioning,
    pub reference: Vec<f64>,
    pub samples: usize,
}

impl<'a> NehviFactory<'a> {
    pub fn new(
        exact: &'a ExactGp,
        cond: &'a BaselineConditioning,
        reference: Vec<f64>,
        samples: usize,
    ) -> Self {
        Self {
            exact,
            cond,
            reference,
            samples,
        }
    }
}

impl AcquisitionFactory for NehviFactory<'_> {
    fn for_restart(
        &self,
        rng: &mut dyn rand::RngCore,
        batch: usize,
    ) -> Result<Box<dyn Acquisition + '_>, AcqError> {
        let k = self.exact.num_tasks();
        let eps_b = Tensor::from_fn(self.samples, self.cond.dim(), |_, _| {
            StandardNormal.sample(&mut *rng)
        });
        let eps_c = Tensor::from_fn(self.samples, batch * k, |_, _| {
            StandardNormal.sample(&mut *rng)
        });
        let joint = GpJoint::new(self.exact, self.cond, &eps_b)?;
        Ok(Box::new(Nehvi::new(joint, self.reference.clone(), eps_c)?))
    }
}

/// Per-task min-max normalization taken from the observed pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub width: Vec<f64>,
    /// Tasks whose observed range was empty; they are left unnormalized.
    pub degenerate: Vec<usize>,
}

impl Normalizer {
    pub fn from_pool(values: &[Vec<f64>]) -> Self {
        let k = values.first().map_or(0, Vec::len);
        let mut lo = Vec::with_capacity(k);
        let mut width = Vec::with_capacity(k);
        let mut degenerate = Vec::new();
        for a in 0..k {
            let min = values.iter().map(|r| r[a]).fold(f64::INFINITY, f64::min);
            let max = values
                .iter()
                .map(|r| r[a])
                .fold(f64::NEG_INFINITY, f64::max);
            if max > min {
                lo.push(min);
                width.push(max - min);
            } else {
                lo.push(0.0);
                width.push(1.0);
                degenerate.push(a);
            }
        }
        Self {
            lo,
            width,
            degenerate,
        }
    }
}

/// Sum over the batch of the task-averaged normalized posterior mean.
pub struct Scalarized<M> {
    pub model: M,
    pub normalizer: Normalizer,
}

impl<M: MeanModel> Acquisition for Scalarized<M> {
    fn evaluate(&self, tape: &mut Tape, feats: Var) -> Result<Var, AcqError> {
        let k = self.model.num_tasks();
        let mean = self.model.mean(tape, feats)?;
        let shift = tape.constant(Tensor::vector(
            self.normalizer.lo.iter().map(|v| -v).collect(),
        ));
        let z = tape.add_row(mean, shift)?;
        let inv = tape.constant(Tensor::vector(
            self.normalizer.width.iter().map(|w| 1.0 / w).collect(),
        ));
        let z = tape.mul_row(z, inv)?;
        let s = tape.sum(z)?;
        Ok(tape.scale(s, 1.0 / k as f64)?)
    }
}

impl<M: MeanModel + Sync> AcquisitionFactory for Scalarized<M> {
    fn for_restart(
        &self,
        _rng: &mut dyn rand::RngCore,
        _batch: usize,
    ) -> Result<Box<dyn Acquisition + '_>, AcqError> {
        Ok(Box::new(ScalarizedRef(self)))
    }
}

struct ScalarizedRef<'a, M>(&'a Scalarized<M>);

impl<M: MeanModel> Acquisition for ScalarizedRef<'_, M> {
    fn evaluate(&self, tape: &mut Tape, feats: Var) -> Result<Var, AcqError> {
        self.0.evaluate(tape, feats)
    }
}

/// Componentwise minimum of `objectives` less 1% of the range; a task
/// with an empty range is offset by 1 instead.
pub fn reference_point(objectives: &[Vec<f64>]) -> Vec<f64> {
    let k = objectives.first().map_or(0, Vec::len);
    (0..k)
        .map(|a| {
            let min = objectives
                .iter()
                .map(|r| r[a])
                .fold(f64::INFINITY, f64::min);
            let max = objectives
                .iter()
                .map(|r| r[a])
                .fold(f64::NEG_INFINITY, f64::max);
            if max > min {
                min - 0.01 * (max - min)
            } else {
                min - 1.0
            }
        })
        .collect()
}

/// Hypervolume improvement of `batch` over `observed`, both as objective rows.
pub fn hypervolume_improvement(
    observed: &[Vec<f64>],
    batch: &[Vec<f64>],
    reference: &[f64],
) -> Result<f64, AcqError> {
    let base = hypervolume(observed, reference)?;
    let mut all = observed.to_vec();
    all.extend_from_slice(batch);
    Ok(hypervolume(&all, reference)? - base)
}
