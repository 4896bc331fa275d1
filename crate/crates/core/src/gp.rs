//! Exact multi-task Gaussian process on pooled autoencoder features.
//!
//! The covariance between output `(i, a)` and `(j, b)` is
//! `s * matern52(|u_i - u_j| / l) * B[a, b]` with task covariance
//! `B = L L^T + diag(delta)`. Joint vectors are ordered point-major, so entry
//! `i * k + a` is task `a` of point `i` and the joint covariance is
//! `K_x ⊗ B`.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::dae::{mlm_loss, Batch, Dae, DaeError};
use crate::params::{Adam, Bound, ParamId, ParamStore};
use crate::seq::{
    apply_mask_corruption, select_positions, training_mask_count, SeqError, TokenSequence,
    Vocabulary,
};
use crate::tape::{Tape, Var};
use crate::tensor::{
    cho_solve, cholesky_jittered, matmul, psd_cholesky, tri_solve, Tensor, TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dae(#[from] DaeError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("lengthscale must be positive, got {0}")]
    NonPositiveLengthscale(f64),
    #[error("need at least {needed} training points, got {got}")]
    DataTooSmall { needed: usize, got: usize },
    #[error("targets must be an n x k matrix matching the inputs")]
    BadTargets,
}

pub const LENGTHSCALE_PRIOR_MEAN: f64 = 0.7;
pub const LENGTHSCALE_PRIOR_STD: f64 = 0.01;
pub const NOISE_INIT: f64 = 0.25;
pub const TASK_DIAG_FLOOR: f64 = 1e-4;

/// Matérn-5/2 covariance between the rows of `a` and `b`.
pub fn matern52(
    a: &Tensor,
    b: &Tensor,
    lengthscale: f64,
    outputscale: f64,
) -> Result<Tensor, GpError> {
    if !(lengthscale > 0.0) {
        return Err(GpError::NonPositiveLengthscale(lengthscale));
    }
    let (n, d) = a.dims2();
    let (m, d2) = b.dims2();
    if d != d2 {
        return Err(TensorError::ShapeMismatch {
            op: "matern52",
            detail: format!("{d} vs {d2} features"),
        }
        .into());
    }
    Ok(Tensor::from_fn(n, m, |i, j| {
        let d2: f64 = a
            .row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let r = d2.sqrt() / lengthscale;
        let s5r = 5f64.sqrt() * r;
        outputscale * (1.0 + s5r + 5.0 * r * r / 3.0) * (-s5r).exp()
    }))
}

#[derive(Debug, Clone)]
struct GpIds {
    log_lengthscale: ParamId,
    log_outputscale: ParamId,
    task_factor: ParamId,
    log_task_diag: ParamId,
    log_noise: ParamId,
}

/// Hyperparameters of the multi-task GP, stored on a log scale where
/// positivity is required.
#[derive(Debug, Clone)]
pub struct Mtgp {
    k: usize,
    store: ParamStore,
    ids: GpIds,
}

/// Derived hyperparameters placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GpVars {
    pub lengthscale: Var,
    pub outputscale: Var,
    pub task_cov: Var,
    pub noise: Var,
}

impl Mtgp {
    /// Lengthscale at the prior mean, unit output scale, `B = I` and noise 0.25.
    pub fn new(k: usize) -> Self {
        let mut store = ParamStore::new();
        let half = (0.5f64).sqrt();
        let ids = GpIds {
            log_lengthscale: store.insert(
                "gp.log_lengthscale",
                Tensor::vector(vec![LENGTHSCALE_PRIOR_MEAN.ln()]),
            ),
            log_outputscale: store.insert("gp.log_outputscale", Tensor::vector(vec![0.0])),
            task_factor: store.insert(
                "gp.task_factor",
                Tensor::from_fn(k, k, |i, j| if i == j { half } else { 0.0 }),
            ),
            log_task_diag: store.insert(
                "gp.log_task_diag",
                Tensor::vector(vec![(0.5 - TASK_DIAG_FLOOR).ln(); k]),
            ),
            log_noise: store.insert("gp.log_noise", Tensor::vector(vec![NOISE_INIT.ln(); k])),
        };
        Self { k, store, ids }
    }

    pub fn num_tasks(&self) -> usize {
        self.k
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn lengthscale(&self) -> f64 {
        self.store.get(self.ids.log_lengthscale).item().exp()
    }

    pub fn outputscale(&self) -> f64 {
        self.store.get(self.ids.log_outputscale).item().exp()
    }

    pub fn noise(&self) -> Vec<f64> {
        let t = self.store.get(self.ids.log_noise);
        t.data().iter().map(|v| v.exp()).collect()
    }

    pub fn task_covariance(&self) -> Tensor {
        let l = self.store.get(self.ids.task_factor);
        let mut b = matmul(l, &l.transpose()).expect("square factor");
        let diag = self.store.get(self.ids.log_task_diag);
        for (i, v) in diag.data().iter().enumerate() {
            b.data_mut()[i * self.k + i] += v.exp() + TASK_DIAG_FLOOR;
        }
        b
    }

    pub fn set_lengthscale(&mut self, l: f64) -> Result<(), GpError> {
        if !(l > 0.0) {
            return Err(GpError::NonPositiveLengthscale(l));
        }
        *self.store.get_mut(self.ids.log_lengthscale) = Tensor::vector(vec![l.ln()]);
        Ok(())
    }

    pub fn set_outputscale(&mut self, s: f64) {
        *self.store.get_mut(self.ids.log_outputscale) = Tensor::vector(vec![s.ln()]);
    }

    pub fn set_noise(&mut self, noise: &[f64]) {
        assert_eq!(noise.len(), self.k);
        *self.store.get_mut(self.ids.log_noise) =
            Tensor::vector(noise.iter().map(|v| v.ln()).collect());
    }

    /// Sets `B = factor factor^T + diag(diag)`; each `diag` entry must
    /// exceed the floor of 1e-4.
    pub fn set_task_covariance(&mut self, factor: Tensor, diag: &[f64]) {
        assert_eq!(factor.shape(), &[self.k, self.k]);
        assert_eq!(diag.len(), self.k);
        *self.store.get_mut(self.ids.task_factor) = factor;
        *self.store.get_mut(self.ids.log_task_diag) = Tensor::vector(
            diag.iter()
                .map(|d| (d - TASK_DIAG_FLOOR).max(1e-300).ln())
                .collect(),
        );
    }

    /// Binds the hyperparameters to `tape` and derives the positive quantities.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<GpVars, GpError> {
        Ok(self.bind_params(tape, trainable)?.1)
    }

    /// Like [`Mtgp::bind`], also returning the raw parameter variables.
    pub fn bind_params(
        &self,
        tape: &mut Tape,
        trainable: bool,
    ) -> Result<(Bound, GpVars), GpError> {
        let p = self.store.bind(tape, trainable);
        let v = self.derive(tape, &p)?;
        Ok((p, v))
    }

    /// Derived hyperparameters from raw parameter variables bound in store order.
    pub fn derive(&self, tape: &mut Tape, p: &Bound) -> Result<GpVars, GpError> {
        let lengthscale = tape.exp(p.var(self.ids.log_lengthscale))?;
        let outputscale = tape.exp(p.var(self.ids.log_outputscale))?;
        let l = p.var(self.ids.task_factor);
        let lt = tape.transpose(l)?;
        let llt = tape.matmul(l, lt)?;
        let delta = tape.exp(p.var(self.ids.log_task_diag))?;
        let delta = tape.add_scalar(delta, TASK_DIAG_FLOOR)?;
        let task_cov = tape.add_diag_tiled(llt, delta)?;
        let noise = tape.exp(p.var(self.ids.log_noise))?;
        Ok(GpVars {
            lengthscale,
            outputscale,
            task_cov,
            noise,
        })
    }
}

/// Input covariance `s * matern52` between feature rows `a` and `b`.
pub fn input_cov(tape: &mut Tape, v: &GpVars, a: Var, b: Var) -> Result<Var, GpError> {
    let d2 = tape.sq_dist(a, b)?;
    let k = tape.matern52(d2, v.lengthscale)?;
    Ok(tape.mul_scalar(k, v.outputscale)?)
}

/// Noise-free joint covariance `K_x(a, b) ⊗ B`.
pub fn joint_cov(tape: &mut Tape, v: &GpVars, a: Var, b: Var) -> Result<Var, GpError> {
    let kx = input_cov(tape, v, a, b)?;
    Ok(tape.kron(kx, v.task_cov)?)
}

/// Joint covariance of noisy training outputs.
pub fn train_cov(tape: &mut Tape, v: &GpVars, f: Var) -> Result<Var, GpError> {
    let k = joint_cov(tape, v, f, f)?;
    Ok(tape.add_diag_tiled(k, v.noise)?)
}

/// Cholesky of a tape matrix, escalating jitter on failure.
pub fn cholesky_on_tape(tape: &mut Tape, a: Var) -> Result<Var, GpError> {
    let (_, jitter) = cholesky_jittered(tape.value(a))?;
    Ok(tape.cholesky(a, jitter)?)
}

/// Negative log marginal likelihood of standardized targets `y` (`[n, k]`).
pub fn data_nlml(tape: &mut Tape, v: &GpVars, f: Var, y: &Tensor) -> Result<Var, GpError> {
    let (n, k) = y.dims2();
    if tape.shape(f)[0] != n {
        return Err(GpError::BadTargets);
    }
    let kmat = train_cov(tape, v, f)?;
    let l = cholesky_on_tape(tape, kmat)?;
    let yv = tape.constant(y.clone().reshape(&[n * k, 1])?);
    let a = tape.tri_solve(l, yv, false)?;
    let a2 = tape.mul(a, a)?;
    let quad = tape.sum(a2)?;
    let quad = tape.scale(quad, 0.5)?;
    let d = tape.diag(l)?;
    let ld = tape.log(d)?;
    let logdet = tape.sum(ld)?;
    let total = tape.add(quad, logdet)?;
    let c = 0.5 * (n * k) as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(tape.add_scalar(total, c)?)
}

/// Negative log density of the lengthscale under its Gaussian prior.
pub fn lengthscale_penalty(tape: &mut Tape, v: &GpVars) -> Result<Var, GpError> {
    let s2 = LENGTHSCALE_PRIOR_STD * LENGTHSCALE_PRIOR_STD;
    let d = tape.add_scalar(v.lengthscale, -LENGTHSCALE_PRIOR_MEAN)?;
    let d2 = tape.mul(d, d)?;
    let d2 = tape.sum(d2)?;
    let q = tape.scale(d2, 0.5 / s2)?;
    Ok(tape.add_scalar(q, 0.5 * (2.0 * std::f64::consts::PI * s2).ln())?)
}

/// Data term plus the lengthscale prior penalty.
pub fn nlml(tape: &mut Tape, v: &GpVars, f: Var, y: &Tensor) -> Result<Var, GpError> {
    let data = data_nlml(tape, v, f, y)?;
    let prior = lengthscale_penalty(tape, v)?;
    Ok(tape.add(data, prior)?)
}

/// Per-task affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Fits on the rows of `y`. Constant tasks get unit scale.
    pub fn fit(y: &[Vec<f64>]) -> Result<Self, GpError> {
        let k = y.first().ok_or(GpError::BadTargets)?.len();
        if k == 0 || y.iter().any(|r| r.len() != k) {
            return Err(GpError::BadTargets);
        }
        let n = y.len() as f64;
        let mean: Vec<f64> = (0..k)
            .map(|a| y.iter().map(|r| r[a]).sum::<f64>() / n)
            .collect();
        let scale = (0..k)
            .map(|a| {
                let var = y.iter().map(|r| (r[a] - mean[a]).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn num_tasks(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, y: &[Vec<f64>]) -> Result<Tensor, GpError> {
        let k = self.num_tasks();
        if y.iter().any(|r| r.len() != k) {
            return Err(GpError::BadTargets);
        }
        let data = y
            .iter()
            .flat_map(|r| (0..k).map(move |a| (r[a] - self.mean[a]) / self.scale[a]))
            .collect();
        Ok(Tensor::new(vec![y.len(), k], data)?)
    }

    pub fn unstandardize(&self, z: &Tensor) -> Vec<Vec<f64>> {
        let k = self.num_tasks();
        z.data()
            .chunks(k)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(a, v)| v * self.scale[a] + self.mean[a])
                    .collect()
            })
            .collect()
    }

    /// `scale[j % k]` for each of `m * k` joint entries.
    fn tiled_scale(&self, m: usize) -> Vec<f64> {
        (0..m * self.num_tasks())
            .map(|j| self.scale[j % self.num_tasks()])
            .collect()
    }
}

/// Gaussian over `m` candidates and `k` tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskPosterior {
    /// `[m, k]`.
    pub mean: Tensor,
    /// `[m * k, m * k]`, point-major.
    pub cov: Tensor,
}

impl MultitaskPosterior {
    pub fn num_points(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn num_tasks(&self) -> usize {
        self.mean.shape()[1]
    }

    /// Marginal variance of task `a` at point `i`.
    pub fn variance(&self, i: usize, a: usize) -> f64 {
        let j = i * self.num_tasks() + a;
        self.cov.get2(j, j)
    }
}

/// Reparameterized samples `mean + L eps`, one `[m, k]` matrix per row of
/// `base_draws` (`[S, m * k]`).
pub fn sample_posterior(
    post: &MultitaskPosterior,
    base_draws: &Tensor,
) -> Result<Vec<Tensor>, GpError> {
    let (s, mk) = base_draws.dims2();
    let (m, k) = post.mean.dims2();
    if mk != m * k {
        return Err(TensorError::ShapeMismatch {
            op: "sample_posterior",
            detail: format!("draws have {mk} columns for {m} x {k} outputs"),
        }
        .into());
    }
    let l = psd_cholesky(&post.cov, 1e-12)?;
    let eps = base_draws.transpose();
    let corr = matmul(&l, &eps)?;
    (0..s)
        .map(|r| {
            let data = (0..mk)
                .map(|j| post.mean.data()[j] + corr.get2(j, r))
                .collect();
            Ok(Tensor::new(vec![m, k], data)?)
        })
        .collect()
}

/// Relative diagonal floor on the training-output posterior covariance.
const SIGMA_FLOOR: f64 = 1e-6;

/// Precomputed quantities for conditioning candidates on a posterior draw
/// of the noise-free training outputs.
///
/// With noisy training covariance `K_y = K_bb + N`, the posterior over the
/// training outputs has covariance `S = K_bb K_y^{-1} N` and a candidate
/// drawn jointly with a training draw `f_b = mu_b + L_S eps` has conditional
/// mean `K_cb beta` and covariance `K_cc - K_cb M K_bc` with
/// `beta = alpha + K_y^{-1} N L_S^{-T} eps` and
/// `M = K_y^{-1} + W^T W`, `W = L_S^{-1} N K_y^{-1}`.
#[derive(Debug, Clone)]
pub struct BaselineConditioning {
    noise_solve: Tensor,
    sigma_chol: Tensor,
    mu: Tensor,
    m: Tensor,
}

impl BaselineConditioning {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `M`, the constant of the conditional candidate covariance.
    pub fn cov_operator(&self) -> &Tensor {
        &self.m
    }
}

/// A multi-task GP conditioned on training features and targets.
#[derive(Debug, Clone)]
pub struct ExactGp {
    gp: Mtgp,
    standardizer: Standardizer,
    feats: Tensor,
    chol: Tensor,
    alpha: Tensor,
}

impl ExactGp {
    /// Conditions on features `[n, d]` and raw targets; `standardizer` maps
    /// the targets to the scale the hyperparameters were fitted on.
    pub fn new(
        gp: Mtgp,
        feats: Tensor,
        y: &[Vec<f64>],
        standardizer: Standardizer,
    ) -> Result<Self, GpError> {
        if y.is_empty()
            || feats.shape().len() != 2
            || feats.shape()[0] != y.len()
            || standardizer.num_tasks() != gp.num_tasks()
        {
            return Err(GpError::BadTargets);
        }
        let ys = standardizer.standardize(y)?;
        let (n, k) = ys.dims2();
        let mut tape = Tape::new();
        let v = gp.bind(&mut tape, false)?;
        let f = tape.constant(feats.clone());
        let ky = train_cov(&mut tape, &v, f)?;
        let (chol, _) = cholesky_jittered(tape.value(ky))?;
        let alpha = cho_solve(&chol, &ys.reshape(&[n * k, 1])?)?;
        Ok(Self {
            gp,
            standardizer,
            feats,
            chol,
            alpha,
        })
    }

    pub fn gp(&self) -> &Mtgp {
        &self.gp
    }

    pub fn num_tasks(&self) -> usize {
        self.gp.num_tasks()
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn train_features(&self) -> &Tensor {
        &self.feats
    }

    /// Exact posterior of the noise-free outputs at candidate features `[m, d]`.
    pub fn posterior_from_features(&self, fc: &Tensor) -> Result<MultitaskPosterior, GpError> {
        let (m, _) = fc.dims2();
        let k = self.num_tasks();
        let mut tape = Tape::new();
        let v = self.gp.bind(&mut tape, false)?;
        let c = tape.constant(fc.clone());
        let b = tape.constant(self.feats.clone());
        let kcb = joint_cov(&mut tape, &v, c, b)?;
        let kcc = joint_cov(&mut tape, &v, c, c)?;
        let kcb = tape.value(kcb).clone();
        let mean = matmul(&kcb, &self.alpha)?;
        let w = tri_solve(&self.chol, &kcb.transpose(), false)?;
        let reduce = matmul(&w.transpose(), &w)?;
        let mut cov = tape.value(kcc).clone();
        let sc = self.standardizer.tiled_scale(m);
        for i in 0..m * k {
            for j in 0..m * k {
                let idx = i * m * k + j;
                cov.data_mut()[idx] = (cov.data()[idx] - reduce.data()[idx]) * sc[i] * sc[j];
            }
        }
        let mean = self
            .standardizer
            .unstandardize(&mean)
            .into_iter()
            .flatten()
            .collect();
        Ok(MultitaskPosterior {
            mean: Tensor::new(vec![m, k], mean)?,
            cov,
        })
    }

    /// Unstandardized posterior mean `[m, k]` as a differentiable function
    /// of candidate features `fc` (`[m, d]`).
    pub fn mean_on_tape(&self, tape: &mut Tape, fc: Var) -> Result<Var, GpError> {
        let beta = self.alpha.clone();
        self.conditional_mean(tape, fc, &beta)
    }

    fn bind_const(&self, tape: &mut Tape) -> Result<(GpVars, Var), GpError> {
        let v = self.gp.bind(tape, false)?;
        let b = tape.constant(self.feats.clone());
        Ok((v, b))
    }

    fn conditional_mean(&self, tape: &mut Tape, fc: Var, beta: &Tensor) -> Result<Var, GpError> {
        let m = tape.shape(fc)[0];
        let k = self.num_tasks();
        let (v, b) = self.bind_const(tape)?;
        let kcb = joint_cov(tape, &v, fc, b)?;
        let beta = tape.constant(beta.clone());
        let mu = tape.matmul(kcb, beta)?;
        self.unstandardize_on_tape(tape, mu, m, k)
    }

    fn unstandardize_on_tape(
        &self,
        tape: &mut Tape,
        mu: Var,
        m: usize,
        k: usize,
    ) -> Result<Var, GpError> {
        let mu = tape.reshape(mu, &[m, k])?;
        let s = tape.constant(Tensor::vector(self.standardizer.scale.clone()));
        let mu = tape.mul_row(mu, s)?;
        let c = tape.constant(Tensor::vector(self.standardizer.mean.clone()));
        Ok(tape.add_row(mu, c)?)
    }

    /// Precomputes the training-output posterior needed for joint sampling.
    pub fn conditioning(&self) -> Result<BaselineConditioning, GpError> {
        let nk = self.alpha.len();
        let mut tape = Tape::new();
        let v = self.gp.bind(&mut tape, false)?;
        let f = tape.constant(self.feats.clone());
        let kbb = joint_cov(&mut tape, &v, f, f)?;
        let kbb = tape.value(kbb).clone();
        let noise = self.gp.noise();
        let k = self.num_tasks();
        let nvec: Vec<f64> = (0..nk).map(|j| noise[j % k]).collect();
        let ky_inv = cho_solve(&self.chol, &Tensor::identity(nk))?;
        // K_y^{-1} N, scaling columns
        let mut noise_solve = ky_inv.clone();
        for i in 0..nk {
            for j in 0..nk {
                noise_solve.data_mut()[i * nk + j] *= nvec[j];
            }
        }
        let mut sigma = matmul(&kbb, &noise_solve)?;
        for i in 0..nk {
            for j in 0..i {
                let avg = 0.5 * (sigma.get2(i, j) + sigma.get2(j, i));
                sigma.data_mut()[i * nk + j] = avg;
                sigma.data_mut()[j * nk + i] = avg;
            }
        }
        // S is often numerically singular (near-duplicate features); without
        // a relative floor, M = K_y^{-1} + W^T W blows up and the candidate
        // covariance loses all precision to cancellation.
        let floor = SIGMA_FLOOR * (0..nk).map(|i| sigma.get2(i, i)).sum::<f64>() / nk as f64;
        for i in 0..nk {
            sigma.data_mut()[i * nk + i] += floor;
        }
        let (sigma_chol, _) = cholesky_jittered(&sigma)?;
        let w = tri_solve(&sigma_chol, &noise_solve.transpose(), false)?;
        let mut m = matmul(&w.transpose(), &w)?;
        for (x, y) in m.data_mut().iter_mut().zip(ky_inv.data()) {
            *x += y;
        }
        let mu = matmul(&kbb, &self.alpha)?;
        Ok(BaselineConditioning {
            noise_solve,
            sigma_chol,
            mu,
            m,
        })
    }

    /// One posterior draw of the training outputs from standard normal
    /// `eps` (length `n * k`): returns the unstandardized `[n, k]` values and
    /// the weight vector `beta` for [`ExactGp::conditional_on_tape`].
    pub fn baseline_draw(
        &self,
        cond: &BaselineConditioning,
        eps: &[f64],
    ) -> Result<(Vec<Vec<f64>>, Tensor), GpError> {
        let nk = cond.dim();
        let k = self.num_tasks();
        let e = Tensor::new(vec![nk, 1], eps.to_vec())?;
        let mut fb = matmul(&cond.sigma_chol, &e)?;
        fb.add_assign(&cond.mu);
        let s = tri_solve(&cond.sigma_chol, &e, true)?;
        let mut beta = matmul(&cond.noise_solve, &s)?;
        beta.add_assign(&self.alpha);
        let fb = self.standardizer.unstandardize(&fb.reshape(&[nk / k, k])?);
        Ok((fb, beta))
    }

    /// Unstandardized candidate mean `[m, k]` and covariance
    /// `[m * k, m * k]`, conditioned on the training draw behind `beta`.
    pub fn conditional_on_tape(
        &self,
        tape: &mut Tape,
        cond: &BaselineConditioning,
        fc: Var,
        beta: &Tensor,
    ) -> Result<(Var, Var), GpError> {
        let m = tape.shape(fc)[0];
        let k = self.num_tasks();
        let (v, b) = self.bind_const(tape)?;
        let kcb = joint_cov(tape, &v, fc, b)?;
        let kcc = joint_cov(tape, &v, fc, fc)?;
        let beta = tape.constant(beta.clone());
        let mu = tape.matmul(kcb, beta)?;
        let mean = self.unstandardize_on_tape(tape, mu, m, k)?;
        let mc = tape.constant(cond.m.clone());
        let a = tape.matmul(kcb, mc)?;
        let kbc = tape.transpose(kcb)?;
        let red = tape.matmul(a, kbc)?;
        let cov = tape.sub(kcc, red)?;
        let sc = self.standardizer.tiled_scale(m);
        let outer = Tensor::from_fn(m * k, m * k, |i, j| sc[i] * sc[j]);
        let outer = tape.constant(outer);
        let cov = tape.mul(cov, outer)?;
        Ok((mean, cov))
    }
}

/// An [`ExactGp`] on top of the autoencoder's pooled features.
#[derive(Clone)]
pub struct Surrogate {
    dae: Dae,
    vocab: Vocabulary,
    train: Vec<TokenSequence>,
    exact: ExactGp,
}

impl Surrogate {
    pub fn new(
        dae: Dae,
        gp: Mtgp,
        vocab: Vocabulary,
        seqs: &[TokenSequence],
        y: &[Vec<f64>],
    ) -> Result<Self, GpError> {
        let standardizer = Standardizer::fit(y)?;
        Self::with_standardizer(dae, gp, vocab, seqs, y, standardizer)
    }

    pub fn with_standardizer(
        dae: Dae,
        gp: Mtgp,
        vocab: Vocabulary,
        seqs: &[TokenSequence],
        y: &[Vec<f64>],
        standardizer: Standardizer,
    ) -> Result<Self, GpError> {
        if seqs.is_empty() || seqs.len() != y.len() {
            return Err(GpError::BadTargets);
        }
        let feats = dae.features(seqs, &vocab)?;
        let exact = ExactGp::new(gp, feats, y, standardizer)?;
        Ok(Self {
            dae,
            vocab,
            train: seqs.to_vec(),
            exact,
        })
    }

    pub fn dae(&self) -> &Dae {
        &self.dae
    }

    pub fn gp(&self) -> &Mtgp {
        self.exact.gp()
    }

    pub fn exact(&self) -> &ExactGp {
        &self.exact
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_tasks(&self) -> usize {
        self.exact.num_tasks()
    }

    pub fn train_sequences(&self) -> &[TokenSequence] {
        &self.train
    }

    pub fn features(&self, seqs: &[TokenSequence]) -> Result<Tensor, GpError> {
        Ok(self.dae.features(seqs, &self.vocab)?)
    }

    pub fn posterior(&self, seqs: &[TokenSequence]) -> Result<MultitaskPosterior, GpError> {
        let f = self.features(seqs)?;
        self.exact.posterior_from_features(&f)
    }
}

/// Schedule for joint autoencoder and GP training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub holdout_fraction: f64,
    pub rel_tol: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            beta1: 0.0,
            beta2: 0.01,
            weight_decay: 1e-4,
            holdout_fraction: 0.1,
            rel_tol: 1e-3,
            patience: 32,
            max_epochs: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Epochs actually run.
    pub epochs: usize,
    /// Epoch whose parameters were kept; 0 means the starting parameters.
    pub best_epoch: usize,
    /// Mean per-value Gaussian NLL on the holdout split, standardized scale.
    /// `NaN` when the holdout split is empty.
    pub holdout_nll: f64,
    /// Spearman correlation of posterior mean and target on the holdout split.
    pub holdout_spearman: Vec<f64>,
    /// Training objective (NLML plus prior) at the start of each epoch.
    pub train_nlml: Vec<f64>,
    /// Holdout NLL of the starting parameters followed by one entry per epoch.
    pub holdout_history: Vec<f64>,
    pub holdout_indices: Vec<usize>,
}

/// Trains `dae` and `gp` in place, alternating one GP step and one masked
/// language model step per epoch, and keeps the parameters with the best
/// holdout NLL.
pub fn fit<R: Rng + ?Sized>(
    dae: &mut Dae,
    gp: &mut Mtgp,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
    y: &[Vec<f64>],
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<FitReport, GpError> {
    if seqs.len() != y.len() || y.iter().any(|r| r.len() != gp.num_tasks()) {
        return Err(GpError::BadTargets);
    }
    let n = seqs.len();
    let n_hold = (cfg.holdout_fraction * n as f64).round() as usize;
    if n < n_hold + 2 {
        return Err(GpError::DataTooSmall {
            needed: n_hold + 2,
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let mut hold_idx = hold_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    hold_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| -> (Vec<TokenSequence>, Vec<Vec<f64>>) {
        (
            idx.iter().map(|&i| seqs[i].clone()).collect(),
            idx.iter().map(|&i| y[i].clone()).collect(),
        )
    };
    let (train_x, train_y) = pick(&train_idx);
    let (hold_x, hold_y) = pick(&hold_idx);
    let standardizer = Standardizer::fit(&train_y)?;
    let ys = standardizer.standardize(&train_y)?;
    let train_batch = Batch::new(&train_x, vocab)?;

    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let evaluate = |dae: &Dae, gp: &Mtgp| -> Result<(f64, Vec<f64>), GpError> {
        if hold_x.is_empty() {
            return Ok((f64::NAN, Vec::new()));
        }
        holdout_metrics(dae, gp, vocab, &train_x, &train_y, &hold_x, &hold_y)
    };

    let (mut best_nll, _) = evaluate(dae, gp)?;
    let mut holdout_history = vec![best_nll];
    let mut best = (dae.params().clone(), gp.params().clone());
    let mut best_epoch = 0;
    let mut anchor = best_nll;
    let mut stale = 0;
    let mut train_nlml = Vec::new();
    let mut epochs = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        train_nlml.push(gp_step(dae, gp, &train_batch, &ys, &mut adam)?);
        mlm_step(dae, gp, vocab, &train_x, &mut adam, rng)?;
        if hold_x.is_empty() {
            best = (dae.params().clone(), gp.params().clone());
            best_epoch = epoch;
            continue;
        }
        let (nll, _) = evaluate(dae, gp)?;
        holdout_history.push(nll);
        if nll < best_nll {
            best_nll = nll;
            best = (dae.params().clone(), gp.params().clone());
            best_epoch = epoch;
        }
        if nll < anchor - cfg.rel_tol * anchor.abs() {
            anchor = nll;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    dae.load_params(best.0)?;
    *gp.params_mut() = best.1;
    let (holdout_nll, holdout_spearman) = evaluate(dae, gp)?;
    Ok(FitReport {
        epochs,
        best_epoch,
        holdout_nll,
        holdout_spearman,
        train_nlml,
        holdout_history,
        holdout_indices: hold_idx,
    })
}

fn apply_adam(
    adam: &mut Adam,
    dae: &mut Dae,
    gp: &mut Mtgp,
    dae_grads: &[Tensor],
    gp_grads: Option<&[Tensor]>,
) {
    let mut grads: Vec<Option<&Tensor>> = dae_grads.iter().map(Some).collect();
    match gp_grads {
        Some(g) => grads.extend(g.iter().map(Some)),
        None => grads.extend(std::iter::repeat_n(None, gp.params().len())),
    }
    let mut refs: Vec<&mut Tensor> = dae
        .params_mut()
        .values_mut()
        .iter_mut()
        .chain(gp.params_mut().values_mut().iter_mut())
        .collect();
    adam.step(&mut refs, &grads);
}

fn gp_step(
    dae: &mut Dae,
    gp: &mut Mtgp,
    batch: &Batch,
    ys: &Tensor,
    adam: &mut Adam,
) -> Result<f64, GpError> {
    let mut tape = Tape::new();
    let p = dae.bind(&mut tape, true);
    let (gstore, v) = gp.bind_params(&mut tape, true)?;
    let z = dae.encode(&mut tape, &p, batch)?;
    let zp = dae.disc_encode(&mut tape, &p, z, batch)?;
    let f = dae.pool(&mut tape, zp, batch)?;
    let loss = nlml(&mut tape, &v, f, ys)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let dg = p.gradients(&grads);
    let gg = gstore.gradients(&grads);
    apply_adam(adam, dae, gp, &dg, Some(&gg));
    Ok(value)
}

fn mlm_step<R: Rng + ?Sized>(
    dae: &mut Dae,
    gp: &mut Mtgp,
    vocab: &Vocabulary,
    seqs: &[TokenSequence],
    adam: &mut Adam,
    rng: &mut R,
) -> Result<(), GpError> {
    let mut corrupted = Vec::with_capacity(seqs.len());
    let mut plans = Vec::with_capacity(seqs.len());
    for s in seqs {
        let n_mask = training_mask_count(s, vocab);
        let plan = select_positions(s, n_mask, vocab, rng)?;
        corrupted.push(apply_mask_corruption(s, &plan, vocab));
        plans.push(plan);
    }
    let batch = Batch::new(&corrupted, vocab)?;
    let mut tape = Tape::new();
    let p = dae.bind(&mut tape, true);
    let z = dae.encode(&mut tape, &p, &batch)?;
    let zp = dae.disc_encode(&mut tape, &p, z, &batch)?;
    let logits = dae.mlm_logits(&mut tape, &p, z, zp, &batch)?;
    let loss = mlm_loss(&mut tape, logits, seqs, &plans)?;
    let grads = tape.backward(loss)?;
    let dg = p.gradients(&grads);
    apply_adam(adam, dae, gp, &dg, None);
    Ok(())
}

fn holdout_metrics(
    dae: &Dae,
    gp: &Mtgp,
    vocab: &Vocabulary,
    train_x: &[TokenSequence],
    train_y: &[Vec<f64>],
    hold_x: &[TokenSequence],
    hold_y: &[Vec<f64>],
) -> Result<(f64, Vec<f64>), GpError> {
    let s = Surrogate::new(dae.clone(), gp.clone(), vocab.clone(), train_x, train_y)?;
    let post = s.posterior(hold_x)?;
    let k = gp.num_tasks();
    let noise = gp.noise();
    let st = s.exact().standardizer();
    let mut nll = 0.0;
    for (i, row) in hold_y.iter().enumerate() {
        for a in 0..k {
            let sc = st.scale[a];
            let mu = (post.mean.get2(i, a) - st.mean[a]) / sc;
            let var = post.variance(i, a).max(0.0) / (sc * sc) + noise[a];
            let z = (row[a] - st.mean[a]) / sc;
            nll += 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (z - mu).powi(2) / var);
        }
    }
    nll /= (hold_y.len() * k) as f64;
    let rho = (0..k)
        .map(|a| {
            let pred: Vec<f64> = (0..hold_y.len()).map(|i| post.mean.get2(i, a)).collect();
            let truth: Vec<f64> = hold_y.iter().map(|r| r[a]).collect();
            spearman(&pred, &truth)
        })
        .collect();
    Ok((nll, rho))
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
