//! Convolutional denoising autoencoder.
//!
//! The shared encoder embeds tokens (learned vocabulary embeddings plus fixed
//! sinusoidal position encodings), runs pre-activation residual blocks and
//! projects to `latent_dim` channels to give the token-level grid `Z`. A
//! single-block discriminative encoder maps `Z` to `Z'`, which is mean-pooled
//! over non-padding positions into GP features. The MLM decoder consumes the
//! channel concatenation of `Z` and `Z'` and produces per-position logits.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::params::{Bound, ParamId, ParamStore};
use crate::seq::{CorruptionPlan, TokenId, TokenSequence, Vocabulary};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("corruption plan is empty")]
    EmptyPlan,
    #[error("no eligible positions")]
    EmptySet,
    #[error("every token is banned at position {0}")]
    AllTokensBanned(usize),
    #[error("sequence has no non-padding positions")]
    EmptyIndexSet,
    #[error("batch is empty or has inconsistent lengths")]
    BadBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ArchitectureConfig {
    pub kernel_width: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub shared_encoder_blocks: usize,
    pub disc_encoder_blocks: usize,
    pub decoder_blocks: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            kernel_width: 5,
            channels: 64,
            latent_dim: 16,
            shared_encoder_blocks: 3,
            disc_encoder_blocks: 1,
            decoder_blocks: 3,
        }
    }
}

/// Token ids and padding mask of a batch of equal-length sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<TokenId>,
    pub mask: Rc<[bool]>,
    pub size: usize,
    pub t: usize,
}

impl Batch {
    pub fn new(seqs: &[TokenSequence], vocab: &Vocabulary) -> Result<Self, DaeError> {
        let t = seqs.first().ok_or(DaeError::BadBatch)?.t_max();
        if seqs.iter().any(|s| s.t_max() != t) {
            return Err(DaeError::BadBatch);
        }
        let ids = seqs.iter().flat_map(|s| s.ids().iter().copied()).collect();
        let mask: Vec<bool> = seqs.iter().flat_map(|s| s.padding_mask(vocab)).collect();
        Ok(Self {
            ids,
            mask: mask.into(),
            size: seqs.len(),
            t,
        })
    }

    fn mask_tensor(&self, channels: usize) -> Tensor {
        let data = self
            .mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, channels))
            .collect();
        Tensor::new(vec![self.size, self.t, channels], data).unwrap()
    }
}

struct Block {
    ln1: (ParamId, ParamId),
    conv1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

/// Parameters and layer layout of the autoencoder.
pub struct Dae {
    config: ArchitectureConfig,
    vocab_size: usize,
    t_max: usize,
    store: ParamStore,
    position: Tensor,
    embed: ParamId,
    encoder: Vec<Block>,
    enc_out_ln: (ParamId, ParamId),
    enc_out: Linear,
    disc: Vec<Block>,
    dec_in: Linear,
    decoder: Vec<Block>,
    dec_out_ln: (ParamId, ParamId),
    dec_out: Linear,
}

impl Clone for Dae {
    fn clone(&self) -> Self {
        let mut copy = Dae::build(self.config, self.vocab_size, self.t_max, &mut |_, shape| {
            Tensor::zeros(shape)
        });
        copy.store = self.store.clone();
        copy
    }
}

/// Fixed sinusoidal encodings, `[t, c]`.
pub fn sinusoidal_positions(t: usize, c: usize) -> Tensor {
    Tensor::from_fn(t, c, |p, j| {
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / c as f64);
        let angle = p as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl Dae {
    pub fn new<R: Rng + ?Sized>(
        config: ArchitectureConfig,
        vocab_size: usize,
        t_max: usize,
        rng: &mut R,
    ) -> Self {
        let mut init = |kind: Init, shape: &[usize]| match kind {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
            Init::Normal(std) => {
                let data = (0..shape.iter().product::<usize>())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        std * z
                    })
                    .collect();
                Tensor::new(shape.to_vec(), data).unwrap()
            }
        };
        Self::build(config, vocab_size, t_max, &mut init)
    }

    fn build(
        config: ArchitectureConfig,
        vocab_size: usize,
        t_max: usize,
        init: &mut dyn FnMut(Init, &[usize]) -> Tensor,
    ) -> Self {
        let ArchitectureConfig {
            channels: c,
            latent_dim: d,
            ..
        } = config;
        let mut bld = Builder {
            store: ParamStore::new(),
            init,
            width: config.kernel_width,
            channels: c,
        };
        let embed = bld.param("embed", Init::Normal(1.0), &[vocab_size, c]);
        let encoder = (0..config.shared_encoder_blocks)
            .map(|i| bld.block(&format!("enc.{i}"), c))
            .collect();
        let enc_out_ln = bld.ln("enc.out_ln", c);
        let enc_out = bld.linear("enc.out", c, d);
        let disc = (0..config.disc_encoder_blocks)
            .map(|i| bld.block(&format!("disc.{i}"), d))
            .collect();
        let dec_in = bld.linear("dec.in", 2 * d, c);
        let decoder = (0..config.decoder_blocks)
            .map(|i| bld.block(&format!("dec.{i}"), c))
            .collect();
        let dec_out_ln = bld.ln("dec.out_ln", c);
        let dec_out = bld.linear("dec.out", c, vocab_size);
        Self {
            config,
            vocab_size,
            t_max,
            store: bld.store,
            position: sinusoidal_positions(t_max, c),
            embed,
            encoder,
            enc_out_ln,
            enc_out,
            disc,
            dec_in,
            decoder,
            dec_out_ln,
            dec_out,
        }
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Replaces parameter values from a checkpointed store with the same layout.
    pub fn load_params(&mut self, store: ParamStore) -> Result<(), DaeError> {
        let same = store.len() == self.store.len()
            && store
                .iter()
                .zip(self.store.iter())
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape());
        if !same {
            return Err(DaeError::Tensor(crate::tensor::mismatch(
                "load_params",
                "layout differs",
            )));
        }
        self.store = store;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.store.bind(tape, trainable)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layer: &Linear,
        x: Var,
    ) -> Result<Var, TensorError> {
        let shape = tape.shape(x).to_vec();
        let cin = *shape.last().unwrap();
        let rows = tape.value(x).len() / cin;
        let flat = tape.reshape(x, &[rows, cin])?;
        let y = tape.matmul(flat, p.var(layer.w))?;
        let y = tape.add_row(y, p.var(layer.b))?;
        let cout = tape.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = cout;
        tape.reshape(y, &out_shape)
    }

    fn block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        b: &Block,
        x: Var,
        mask: &Rc<[bool]>,
    ) -> Result<Var, TensorError> {
        let h = tape.layer_norm(x, p.var(b.ln1.0), p.var(b.ln1.1))?;
        let h = tape.swish(h)?;
        let h = tape.conv1d(h, p.var(b.conv1.0), p.var(b.conv1.1), mask.clone())?;
        let h = tape.layer_norm(h, p.var(b.ln2.0), p.var(b.ln2.1))?;
        let h = tape.swish(h)?;
        let h = tape.conv1d(h, p.var(b.conv2.0), p.var(b.conv2.1), mask.clone())?;
        tape.add(x, h)
    }

    fn masked(&self, tape: &mut Tape, x: Var, batch: &Batch) -> Result<Var, TensorError> {
        let c = *tape.shape(x).last().unwrap();
        let m = tape.constant(batch.mask_tensor(c));
        tape.mul(x, m)
    }

    /// Shared encoder `g`: tokens to the `[batch, t, latent_dim]` grid `Z`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &Batch) -> Result<Var, DaeError> {
        let c = self.config.channels;
        if batch.t != self.t_max {
            return Err(DaeError::BadBatch);
        }
        let e = tape.embedding(p.var(self.embed), &batch.ids)?;
        let pos: Vec<f64> = (0..batch.size)
            .flat_map(|_| self.position.data().iter().copied())
            .collect();
        let pos = tape.constant(Tensor::new(vec![batch.size * batch.t, c], pos)?);
        let h = tape.add(e, pos)?;
        let h = tape.reshape(h, &[batch.size, batch.t, c])?;
        let mut h = self.masked(tape, h, batch)?;
        for b in &self.encoder {
            h = self.block(tape, p, b, h, &batch.mask)?;
        }
        let h = tape.layer_norm(h, p.var(self.enc_out_ln.0), p.var(self.enc_out_ln.1))?;
        let h = tape.swish(h)?;
        let z = self.linear(tape, p, &self.enc_out, h)?;
        Ok(self.masked(tape, z, batch)?)
    }

    /// Discriminative encoder `w`: `Z` to `Z'` with the same shape.
    pub fn disc_encode(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        batch: &Batch,
    ) -> Result<Var, DaeError> {
        let mut h = z;
        for b in &self.disc {
            h = self.block(tape, p, b, h, &batch.mask)?;
        }
        Ok(h)
    }

    /// Mean of `Z'` rows over non-padding positions, `[batch, latent_dim]`.
    pub fn pool(&self, tape: &mut Tape, zp: Var, batch: &Batch) -> Result<Var, DaeError> {
        pool(tape, zp, batch)
    }

    /// MLM decoder `h`: logits `[batch, t, vocab]` from `Z` and `Z'`.
    pub fn mlm_logits(
        &self,
        tape: &mut Tape,
        p: &Bound,
        z: Var,
        zp: Var,
        batch: &Batch,
    ) -> Result<Var, DaeError> {
        let zz = tape.concat_cols(z, zp)?;
        let h = self.linear(tape, p, &self.dec_in, zz)?;
        let mut h = self.masked(tape, h, batch)?;
        for b in &self.decoder {
            h = self.block(tape, p, b, h, &batch.mask)?;
        }
        let h = tape.layer_norm(h, p.var(self.dec_out_ln.0), p.var(self.dec_out_ln.1))?;
        let h = tape.swish(h)?;
        Ok(self.linear(tape, p, &self.dec_out, h)?)
    }

    /// Pooled GP features for a set of sequences, without gradients.
    pub fn features(&self, seqs: &[TokenSequence], vocab: &Vocabulary) -> Result<Tensor, DaeError> {
        let batch = Batch::new(seqs, vocab)?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let z = self.encode(&mut tape, &p, &batch)?;
        let zp = self.disc_encode(&mut tape, &p, z, &batch)?;
        let f = self.pool(&mut tape, zp, &batch)?;
        Ok(tape.value(f).clone())
    }
}

struct Builder<'a> {
    store: ParamStore,
    init: &'a mut dyn FnMut(Init, &[usize]) -> Tensor,
    width: usize,
    channels: usize,
}

impl Builder<'_> {
    fn param(&mut self, name: &str, kind: Init, shape: &[usize]) -> ParamId {
        let t = (self.init)(kind, shape);
        self.store.insert(name, t)
    }

    fn ln(&mut self, name: &str, ch: usize) -> (ParamId, ParamId) {
        (
            self.param(&format!("{name}.gamma"), Init::Ones, &[ch]),
            self.param(&format!("{name}.beta"), Init::Zeros, &[ch]),
        )
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear {
        Linear {
            w: self.param(
                &format!("{name}.w"),
                Init::Normal((1.0 / i as f64).sqrt()),
                &[i, o],
            ),
            b: self.param(&format!("{name}.b"), Init::Zeros, &[o]),
        }
    }

    /// Residual block on `cin` channels with `channels` hidden channels.
    /// The second convolution starts at half the usual scale.
    fn block(&mut self, name: &str, cin: usize) -> Block {
        let (k, c) = (self.width, self.channels);
        let ln1 = self.ln(&format!("{name}.ln1"), cin);
        let conv1 = (
            self.param(
                &format!("{name}.conv1.w"),
                Init::Normal((1.0 / (k * cin) as f64).sqrt()),
                &[k * cin, c],
            ),
            self.param(&format!("{name}.conv1.b"), Init::Zeros, &[c]),
        );
        let ln2 = self.ln(&format!("{name}.ln2"), c);
        let conv2 = (
            self.param(
                &format!("{name}.conv2.w"),
                Init::Normal(0.5 * (1.0 / (k * c) as f64).sqrt()),
                &[k * c, cin],
            ),
            self.param(&format!("{name}.conv2.b"), Init::Zeros, &[cin]),
        );
        Block {
            ln1,
            conv1,
            ln2,
            conv2,
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

pub fn pool(tape: &mut Tape, zp: Var, batch: &Batch) -> Result<Var, DaeError> {
    for b in 0..batch.size {
        if !batch.mask[b * batch.t..(b + 1) * batch.t]
            .iter()
            .any(|&m| m)
        {
            return Err(DaeError::EmptyIndexSet);
        }
    }
    Ok(tape.masked_mean_pool(zp, batch.mask.clone())?)
}

/// Mean cross-entropy of the original tokens at the corrupted positions.
///
/// `logits` is `[batch, t, vocab]`; `plans[b]` applies to `originals[b]`.
pub fn mlm_loss(
    tape: &mut Tape,
    logits: Var,
    originals: &[TokenSequence],
    plans: &[CorruptionPlan],
) -> Result<Var, DaeError> {
    let t = tape.shape(logits)[1];
    let targets: Vec<(usize, usize)> = originals
        .iter()
        .zip(plans)
        .enumerate()
        .flat_map(|(b, (s, plan))| {
            plan.positions()
                .iter()
                .map(move |&p| (b * t + p, s.ids()[p]))
        })
        .collect();
    if targets.is_empty() {
        return Err(DaeError::EmptyPlan);
    }
    Ok(tape.cross_entropy(logits, &targets)?)
}

/// Mean Shannon entropy (nats) of the per-position categorical
/// distributions at the flattened `rows` of `logits`.
pub fn proposal_entropy(tape: &mut Tape, logits: Var, rows: &[usize]) -> Result<Var, DaeError> {
    if rows.is_empty() {
        return Err(DaeError::EmptySet);
    }
    let sel = tape.select_rows(logits, rows)?;
    let p = tape.softmax(sel)?;
    let lp = tape.log_softmax(sel)?;
    let plp = tape.mul(p, lp)?;
    let s = tape.sum(plp)?;
    Ok(tape.scale(s, -1.0 / rows.len() as f64)?)
}

/// Flattened logit rows for `plans[b]` positions of batch item `b`.
pub fn plan_rows(plans: &[CorruptionPlan], t: usize) -> Vec<usize> {
    plans
        .iter()
        .enumerate()
        .flat_map(|(b, plan)| plan.positions().iter().map(move |&p| b * t + p))
        .collect()
}

/// Resamples `base` at the plan positions from the per-position categorical
/// given by `logits` (`[t, vocab]` for this sequence), never proposing the
/// original token or a special token.
pub fn sample_proposals<R: Rng + ?Sized>(
    logits: &[f64],
    base: &TokenSequence,
    plan: &CorruptionPlan,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<TokenSequence, DaeError> {
    let v = vocab.len();
    let mut out = base.clone();
    for &pos in plan.positions() {
        let row = &logits[pos * v..(pos + 1) * v];
        let original = base.ids()[pos];
        let allowed: Vec<usize> = (0..v)
            .filter(|&i| i != original && !vocab.is_special(i))
            .collect();
        if allowed.is_empty() {
            return Err(DaeError::AllTokensBanned(pos));
        }
        let m = allowed
            .iter()
            .map(|&i| row[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = allowed.iter().map(|&i| (row[i] - m).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = *allowed.last().unwrap();
        for (&tok, &w) in allowed.iter().zip(&weights) {
            if u < w {
                pick = tok;
                break;
            }
            u -= w;
        }
        out.set(pos, pick);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::{apply_mask_corruption, tokenize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ArchitectureConfig {
        ArchitectureConfig {
            channels: 8,
            latent_dim: 4,
            ..Default::default()
        }
    }

    fn setup(t_max: usize) -> (Vocabulary, Dae) {
        let vocab = Vocabulary::amino_acids();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dae = Dae::new(small_config(), vocab.len(), t_max, &mut rng);
        (vocab, dae)
    }

    fn forward(dae: &Dae, vocab: &Vocabulary, seqs: &[TokenSequence]) -> (Tensor, Tensor, Tensor) {
        let batch = Batch::new(seqs, vocab).unwrap();
        let mut tape = Tape::new();
        let p = dae.bind(&mut tape, false);
        let z = dae.encode(&mut tape, &p, &batch).unwrap();
        let zp = dae.disc_encode(&mut tape, &p, z, &batch).unwrap();
        let l = dae.mlm_logits(&mut tape, &p, z, zp, &batch).unwrap();
        (
            tape.value(z).clone(),
            tape.value(zp).clone(),
            tape.value(l).clone(),
        )
    }

    #[test]
    fn default_architecture_dims() {
        let vocab = Vocabulary::amino_acids();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dae = Dae::new(ArchitectureConfig::default(), vocab.len(), 36, &mut rng);
        let s = tokenize("AVCAVC", &vocab, 36).unwrap();
        let (z, zp, l) = forward(&dae, &vocab, &[s]);
        assert_eq!(z.shape(), &[1, 36, 16]);
        assert_eq!(zp.shape(), &[1, 36, 16]);
        assert_eq!(l.shape(), &[1, 36, 22]);
        assert!(l.is_finite());
    }

    #[test]
    fn padding_rows_are_zero_and_forward_is_deterministic() {
        let (vocab, dae) = setup(10);
        let s = tokenize("AVCAV", &vocab, 10).unwrap();
        let (z1, zp1, l1) = forward(&dae, &vocab, &[s.clone()]);
        let (z2, zp2, l2) = forward(&dae, &vocab, &[s]);
        assert_eq!(
            (z1.data(), zp1.data(), l1.data()),
            (z2.data(), zp2.data(), l2.data())
        );
        let d = 4;
        assert!(z1.data()[5 * d..].iter().all(|&v| v == 0.0));
        assert!(zp1.data()[5 * d..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extra_padding_changes_no_content_rows() {
        let vocab = Vocabulary::amino_acids();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let short = Dae::new(small_config(), vocab.len(), 8, &mut rng);
        // same parameters; position table just grows
        let mut long = Dae::build(small_config(), vocab.len(), 12, &mut |_, s| {
            Tensor::zeros(s)
        });
        long.store = short.store.clone();
        let a = tokenize("ACDEF", &vocab, 8).unwrap();
        let b = tokenize("ACDEF", &vocab, 12).unwrap();
        let (za, zpa, la) = forward(&short, &vocab, &[a]);
        let (zb, zpb, lb) = forward(&long, &vocab, &[b]);
        assert_eq!(&za.data()[..5 * 4], &zb.data()[..5 * 4]);
        assert_eq!(&zpa.data()[..5 * 4], &zpb.data()[..5 * 4]);
        assert_eq!(&la.data()[..5 * 22], &lb.data()[..5 * 22]);
    }

    #[test]
    fn batch_rows_are_independent() {
        let (vocab, dae) = setup(10);
        let a = tokenize("AVCAV", &vocab, 10).unwrap();
        let b = tokenize("WYWYWYWY", &vocab, 10).unwrap();
        let (z_single, _, _) = forward(&dae, &vocab, &[a.clone()]);
        let (z_pair, _, _) = forward(&dae, &vocab, &[a, b]);
        assert!(z_single
            .data()
            .iter()
            .zip(&z_pair.data()[..40])
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn pool_examples() {
        let vocab = Vocabulary::amino_acids();
        let seqs = [
            tokenize("A", &vocab, 3).unwrap(),
            tokenize("AAA", &vocab, 3).unwrap(),
        ];
        let batch = Batch::new(&seqs, &vocab).unwrap();
        let rows = vec![1.5, -2.0, 9.0, 9.0, 9.0, 9.0, 0.3, 0.1, 0.7, 0.2, -0.5, 0.6];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3, 2], rows.clone()).unwrap());
        let f = pool(&mut tape, x, &batch).unwrap();
        let out = tape.value(f).data();
        // single non-padding position returns that row exactly
        assert_eq!(&out[..2], &[1.5, -2.0]);
        let mean0 = (0.3 + 0.7 + -0.5) / 3.0;
        let mean1 = (0.1 + 0.2 + 0.6) / 3.0;
        assert!((out[2] - mean0).abs() < 1e-12 && (out[3] - mean1).abs() < 1e-12);

        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::filled(&[2, 3, 2], 0.75));
        let f = pool(&mut tape, c, &batch).unwrap();
        assert!(tape
            .value(f)
            .data()
            .iter()
            .all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn mlm_loss_examples() {
        let vocab = Vocabulary::amino_acids();
        let v = vocab.len();
        let s = tokenize("AVC", &vocab, 3).unwrap();
        let plan = CorruptionPlan::new(vec![0, 2], &s, &vocab).unwrap();

        let mut confident = vec![0.0; 3 * v];
        for p in 0..3 {
            confident[p * v + s.ids()[p]] = 800.0;
        }
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(vec![1, 3, v], confident).unwrap());
        let loss = mlm_loss(&mut tape, l, &[s.clone()], &[plan.clone()]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);

        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 3, v]));
        let loss = mlm_loss(&mut tape, l, &[s.clone()], &[plan.clone()]).unwrap();
        assert!((tape.value(loss).item() - (v as f64).ln()).abs() < 1e-12);

        // two positions, hand arithmetic: logits 1 on the true token, 0 elsewhere
        let mut logits = vec![0.0; 3 * v];
        logits[s.ids()[0]] = 1.0;
        logits[2 * v + s.ids()[2]] = 2.0;
        let e = std::f64::consts::E;
        let ce0 = -(e / (e + (v - 1) as f64)).ln();
        let ce2 = -(e * e / (e * e + (v - 1) as f64)).ln();
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::new(vec![1, 3, v], logits).unwrap());
        let loss = mlm_loss(&mut tape, l, &[s.clone()], &[plan]).unwrap();
        assert!((tape.value(loss).item() - (ce0 + ce2) / 2.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 3, v]));
        assert_eq!(
            mlm_loss(&mut tape, l, &[s], &[CorruptionPlan::empty()]),
            Err(DaeError::EmptyPlan)
        );
    }

    #[test]
    fn entropy_examples() {
        let v = 22;
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::zeros(&[2, v]));
        let h = proposal_entropy(&mut tape, u, &[0, 1]).unwrap();
        assert!((tape.value(h).item() - (v as f64).ln()).abs() < 1e-12);

        let mut one_hot = vec![-1000.0; v];
        one_hot[3] = 0.0;
        let mut tape = Tape::new();
        let o = tape.leaf(Tensor::new(vec![1, v], one_hot).unwrap());
        let h = proposal_entropy(&mut tape, o, &[0]).unwrap();
        assert!(tape.value(h).item().abs() < 1e-12);

        let mut half = vec![-1000.0; v];
        half[0] = 0.0;
        half[1] = 0.0;
        let mut tape = Tape::new();
        let o = tape.leaf(Tensor::new(vec![1, v], half).unwrap());
        let h = proposal_entropy(&mut tape, o, &[0]).unwrap();
        assert!((tape.value(h).item() - 2f64.ln()).abs() < 1e-12);

        assert_eq!(proposal_entropy(&mut tape, o, &[]), Err(DaeError::EmptySet));
    }

    #[test]
    fn proposals_respect_bans() {
        let vocab = Vocabulary::amino_acids();
        let v = vocab.len();
        let s = tokenize("AVCA", &vocab, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(
            sample_proposals(
                &vec![0.0; 5 * v],
                &s,
                &CorruptionPlan::empty(),
                &vocab,
                &mut rng
            )
            .unwrap(),
            s
        );

        // heavy mass on the original token and on the specials
        let plan = CorruptionPlan::new(vec![1, 3], &s, &vocab).unwrap();
        let mut logits = vec![0.0; 5 * v];
        for p in 0..5 {
            logits[p * v + s.ids()[p]] = 50.0;
            logits[p * v + vocab.masking_id()] = 50.0;
            logits[p * v + vocab.padding_id()] = 50.0;
        }
        for _ in 0..10_000 {
            let out = sample_proposals(&logits, &s, &plan, &vocab, &mut rng).unwrap();
            for &p in plan.positions() {
                assert_ne!(out.ids()[p], s.ids()[p]);
                assert!(!vocab.is_special(out.ids()[p]));
            }
            assert_eq!(out.ids()[0], s.ids()[0]);
            assert_eq!(out.ids()[2], s.ids()[2]);
        }

        let w = vocab.id("W").unwrap();
        let mut forced = vec![-1e4; 5 * v];
        forced[v + w] = 0.0;
        let plan = CorruptionPlan::new(vec![1], &s, &vocab).unwrap();
        let out = sample_proposals(&forced, &s, &plan, &vocab, &mut rng).unwrap();
        assert_eq!(out.ids()[1], w);
    }

    #[test]
    fn all_banned_is_an_error() {
        let vocab = Vocabulary::new(
            vec!["[PAD]".into(), "[MASK]".into(), "A".into()],
            "[PAD]",
            "[MASK]",
        )
        .unwrap();
        let s = tokenize("AA", &vocab, 2).unwrap();
        let plan = CorruptionPlan::new(vec![0], &s, &vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_proposals(&[0.0; 6], &s, &plan, &vocab, &mut rng),
            Err(DaeError::AllTokensBanned(0))
        );
    }

    #[test]
    fn masked_input_still_encodes() {
        let (vocab, dae) = setup(8);
        let s = tokenize("ACDEF", &vocab, 8).unwrap();
        let plan = CorruptionPlan::new(vec![2], &s, &vocab).unwrap();
        let c = apply_mask_corruption(&s, &plan, &vocab);
        let (z, _, _) = forward(&dae, &vocab, &[c]);
        assert!(z.is_finite());
    }
}
