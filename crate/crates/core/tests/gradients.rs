//! Finite-difference checks for every tape primitive and the composed
//! training and search objectives.

use std::rc::Rc;

use lambo::acquisition::{reference_point, AcquisitionFactory, NehviFactory};
use lambo::dae::{mlm_loss, ArchitectureConfig, Batch, Dae};
use lambo::gp::{nlml, Mtgp, Surrogate};
use lambo::gradcheck::check;
use lambo::lambo::{init_latents, inner_objective};
use lambo::params::Bound;
use lambo::seq::{
    apply_mask_corruption, select_positions, CorruptionPlan, TokenSequence, Vocabulary,
};
use lambo::tape::{Tape, Var};
use lambo::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROBES: usize = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Contracts an arbitrary output with fixed random weights so every output
/// element contributes a distinct amount to the scalar.
fn contract(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_probe<F>(name: &str, probe: usize, inputs: &[Tensor], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let r = check(inputs, H, f).unwrap();
    let err = r.max_relative_error();
    assert!(
        err < TOL,
        "{name} probe {probe}: relative error {err:e} ({:?})",
        r.relative_errors
    );
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5))
}

#[test]
pub fn elementwise_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for probe in 0..PROBES {
        let (r, c) = dims(&mut rng);
        let a = rand_tensor(&mut rng, &[r, c], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[r, c], -2.0, 2.0);
        let seed = probe as u64;
        assert_probe("add", probe, &[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe("sub", probe, &[a.clone(), b.clone()], |t, v| {
            let y = t.sub(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe("mul", probe, &[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe("mul fan-out", probe, &[a.clone()], |t, v| {
            let y = t.mul(v[0], v[0])?;
            contract(t, y, seed)
        });
    }
}

#[test]
pub fn elementwise_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for probe in 0..PROBES {
        let (r, c) = dims(&mut rng);
        let a = rand_tensor(&mut rng, &[r, c], -2.0, 2.0);
        let pos = rand_tensor(&mut rng, &[r, c], 0.2, 3.0);
        let s = rand_tensor(&mut rng, &[1], -2.0, 2.0);
        let seed = probe as u64;
        assert_probe("neg", probe, &[a.clone()], |t, v| {
            let y = t.neg(v[0])?;
            contract(t, y, seed)
        });
        assert_probe("scale", probe, &[a.clone()], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            contract(t, y, seed)
        });
        assert_probe("add_scalar", probe, &[a.clone()], |t, v| {
            let y = t.add_scalar(v[0], 0.3)?;
            let y = t.mul(y, y)?;
            contract(t, y, seed)
        });
        assert_probe("mul_scalar", probe, &[a.clone(), s.clone()], |t, v| {
            let y = t.mul_scalar(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe("exp", probe, &[a.clone()], |t, v| {
            let y = t.exp(v[0])?;
            contract(t, y, seed)
        });
        assert_probe("log", probe, &[pos.clone()], |t, v| {
            let y = t.log(v[0])?;
            contract(t, y, seed)
        });
        assert_probe("sqrt", probe, &[pos.clone()], |t, v| {
            let y = t.sqrt(v[0])?;
            contract(t, y, seed)
        });
        assert_probe("swish", probe, &[a.clone()], |t, v| {
            let y = t.swish(v[0])?;
            contract(t, y, seed)
        });
    }
}

#[test]
pub fn reductions_and_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for probe in 0..PROBES {
        let (r, c) = dims(&mut rng);
        let a = rand_tensor(&mut rng, &[r, c], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[r + 1, c], -2.0, 2.0);
        let e = rand_tensor(&mut rng, &[r, c + 2], -2.0, 2.0);
        let row = rand_tensor(&mut rng, &[c], -2.0, 2.0);
        let seed = probe as u64;
        assert_probe("sum", probe, &[a.clone()], |t, v| {
            let y = t.exp(v[0])?;
            t.sum(y)
        });
        assert_probe("mean", probe, &[a.clone()], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        });
        assert_probe("reshape", probe, &[a.clone()], |t, v| {
            let y = t.reshape(v[0], &[c, r])?;
            contract(t, y, seed)
        });
        assert_probe("transpose", probe, &[a.clone()], |t, v| {
            let y = t.transpose(v[0])?;
            contract(t, y, seed)
        });
        assert_probe("add_row", probe, &[a.clone(), row.clone()], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe("mul_row", probe, &[a.clone(), row.clone()], |t, v| {
            let y = t.mul_row(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe("concat_rows", probe, &[a.clone(), b.clone()], |t, v| {
            let y = t.concat_rows(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe("concat_cols", probe, &[a.clone(), e.clone()], |t, v| {
            let y = t.concat_cols(v[0], v[1])?;
            contract(t, y, seed)
        });
        let rows: Vec<usize> = (0..4).map(|_| rng.random_range(0..r)).collect();
        assert_probe("select_rows", probe, &[a.clone()], |t, v| {
            let y = t.select_rows(v[0], &rows)?;
            contract(t, y, seed)
        });
    }
}

#[test]
pub fn matrix_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for probe in 0..PROBES {
        let (n, k) = dims(&mut rng);
        let m = rng.random_range(1..5);
        let a = rand_tensor(&mut rng, &[n, k], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, m], -2.0, 2.0);
        let c = rand_tensor(&mut rng, &[m, n], -2.0, 2.0);
        let seed = probe as u64;
        assert_probe("matmul", probe, &[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe("kron", probe, &[a.clone(), c.clone()], |t, v| {
            let y = t.kron(v[0], v[1])?;
            contract(t, y, seed)
        });
        let sq = rand_tensor(&mut rng, &[n, n], -2.0, 2.0);
        assert_probe("diag", probe, &[sq.clone()], |t, v| {
            let y = t.diag(v[0])?;
            contract(t, y, seed)
        });
        let tile = rand_tensor(&mut rng, &[1], -1.0, 1.0);
        assert_probe("add_diag_tiled", probe, &[sq.clone(), tile], |t, v| {
            let y = t.add_diag_tiled(v[0], v[1])?;
            contract(t, y, seed)
        });
    }
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let x = rand_tensor(rng, &[n, n], -1.0, 1.0);
    let mut a = lambo::tensor::matmul(&x, &x.transpose()).unwrap();
    for i in 0..n {
        a.data_mut()[i * n + i] += 0.5;
    }
    a
}

/// Symmetrizes a free matrix so finite differences see a symmetric input.
fn symmetric(t: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let xt = t.transpose(x)?;
    let s = t.add(x, xt)?;
    t.scale(s, 0.5)
}

#[test]
pub fn cholesky_and_solves() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for probe in 0..PROBES {
        let n = rng.random_range(1..6);
        let m = rng.random_range(1..4);
        let a = spd(&mut rng, n);
        let b = rand_tensor(&mut rng, &[n, m], -2.0, 2.0);
        let seed = probe as u64;
        assert_probe("cholesky", probe, &[a.clone()], |t, v| {
            let s = symmetric(t, v[0])?;
            let l = t.cholesky(s, 0.0)?;
            contract(t, l, seed)
        });
        for transpose in [false, true] {
            assert_probe("tri_solve", probe, &[a.clone(), b.clone()], |t, v| {
                let s = symmetric(t, v[0])?;
                let l = t.cholesky(s, 0.0)?;
                let x = t.tri_solve(l, v[1], transpose)?;
                contract(t, x, seed)
            });
        }
        assert_probe("log-determinant", probe, &[a.clone()], |t, v| {
            let s = symmetric(t, v[0])?;
            let l = t.cholesky(s, 1e-8)?;
            let d = t.diag(l)?;
            let ld = t.log(d)?;
            t.sum(ld)
        });
    }
}

#[test]
pub fn kernel_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for probe in 0..PROBES {
        let (n, d) = dims(&mut rng);
        let m = rng.random_range(1..5);
        let a = rand_tensor(&mut rng, &[n, d], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[m, d], -1.0, 1.0);
        let ls = Tensor::vector(vec![rng.random_range(0.3..2.0)]);
        let seed = probe as u64;
        assert_probe("sq_dist", probe, &[a.clone(), b.clone()], |t, v| {
            let y = t.sq_dist(v[0], v[1])?;
            contract(t, y, seed)
        });
        assert_probe(
            "matern52",
            probe,
            &[a.clone(), b.clone(), ls.clone()],
            |t, v| {
                let d2 = t.sq_dist(v[0], v[1])?;
                let k = t.matern52(d2, v[2])?;
                contract(t, k, seed)
            },
        );
        // self-distances sit exactly at zero, where the kernel must stay smooth
        assert_probe(
            "matern52 at zero",
            probe,
            &[a.clone(), ls.clone()],
            |t, v| {
                let d2 = t.sq_dist(v[0], v[0])?;
                let k = t.matern52(d2, v[1])?;
                contract(t, k, seed)
            },
        );
    }
}

#[test]
pub fn softmax_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for probe in 0..PROBES {
        let (r, c) = dims(&mut rng);
        let c = c + 1;
        let x = rand_tensor(&mut rng, &[r, c], -3.0, 3.0);
        let seed = probe as u64;
        assert_probe("softmax", probe, &[x.clone()], |t, v| {
            let y = t.softmax(v[0])?;
            contract(t, y, seed)
        });
        assert_probe("log_softmax", probe, &[x.clone()], |t, v| {
            let y = t.log_softmax(v[0])?;
            contract(t, y, seed)
        });
        let targets: Vec<(usize, usize)> = (0..3)
            .map(|_| (rng.random_range(0..r), rng.random_range(0..c)))
            .collect();
        assert_probe("cross_entropy", probe, &[x.clone()], |t, v| {
            t.cross_entropy(v[0], &targets)
        });
    }
}

fn random_mask(rng: &mut ChaCha8Rng, b: usize, t: usize) -> Rc<[bool]> {
    let mut m = Vec::with_capacity(b * t);
    for _ in 0..b {
        let len = rng.random_range(1..=t);
        m.extend((0..t).map(|i| i < len));
    }
    m.into()
}

#[test]
pub fn network_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for probe in 0..PROBES {
        let b = rng.random_range(1..3);
        let t = rng.random_range(2..6);
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let seed = probe as u64;
        let mask = random_mask(&mut rng, b, t);

        let x = rand_tensor(&mut rng, &[b, t, cin], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[k * cin, cout], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[cout], -1.0, 1.0);
        let m = mask.clone();
        assert_probe("conv1d", probe, &[x.clone(), w, bias], move |tp, v| {
            let y = tp.conv1d(v[0], v[1], v[2], m.clone())?;
            contract(tp, y, seed)
        });

        let c = cin + 1;
        let xl = rand_tensor(&mut rng, &[b, t, c], -2.0, 2.0);
        let g = rand_tensor(&mut rng, &[c], 0.5, 1.5);
        let be = rand_tensor(&mut rng, &[c], -1.0, 1.0);
        assert_probe("layer_norm", probe, &[xl.clone(), g, be], |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2])?;
            contract(tp, y, seed)
        });

        let m = mask.clone();
        assert_probe("masked_mean_pool", probe, &[xl.clone()], move |tp, v| {
            let y = tp.masked_mean_pool(v[0], m.clone())?;
            contract(tp, y, seed)
        });

        let vocab = rng.random_range(2..6);
        let table = rand_tensor(&mut rng, &[vocab, c], -1.0, 1.0);
        let ids: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..vocab)).collect();
        assert_probe("embedding", probe, &[table], |tp, v| {
            let y = tp.embedding(v[0], &ids)?;
            contract(tp, y, seed)
        });
    }
}

#[test]
pub fn hypervolume_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for probe in 0..PROBES {
        let k = 2 + probe % 2;
        let n = rng.random_range(1..7);
        let pts = rand_tensor(&mut rng, &[n, k], 0.0, 1.0);
        let reference = vec![0.0; k];
        assert_probe("hypervolume", probe, &[pts], |t, v| {
            t.hypervolume(v[0], &reference)
        });
    }
}

#[test]
pub fn gradients_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = spd(&mut rng, 4);
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(a.clone());
        let l = t.cholesky(x, 0.0).unwrap();
        let s = t.swish(l).unwrap();
        let y = t.sum(s).unwrap();
        t.backward(y).unwrap().get(x)
    };
    assert_eq!(run().data(), run().data());
}

#[test]
pub fn fan_out_gradients_add() {
    // d/dx [exp(x) + x^2] = exp(x) + 2x
    let x0 = Tensor::vector(vec![0.3, -1.2]);
    let mut t = Tape::new();
    let x = t.leaf(x0.clone());
    let f = t.exp(x).unwrap();
    let g = t.mul(x, x).unwrap();
    let s = t.add(f, g).unwrap();
    let y = t.sum(s).unwrap();
    let grad = t.backward(y).unwrap().get(x);
    for (g, x) in grad.data().iter().zip(x0.data()) {
        assert!((g - (x.exp() + 2.0 * x)).abs() < 1e-12);
    }
}

fn tiny_dae(seed: u64, t: usize) -> (Dae, Vocabulary) {
    let vocab = Vocabulary::amino_acids();
    let cfg = ArchitectureConfig {
        kernel_width: 3,
        channels: 4,
        latent_dim: 3,
        shared_encoder_blocks: 1,
        disc_encoder_blocks: 1,
        decoder_blocks: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dae = Dae::new(cfg, vocab.len(), t, &mut rng);
    (dae, vocab)
}

fn random_seqs(rng: &mut ChaCha8Rng, n: usize, t: usize, vocab: &Vocabulary) -> Vec<TokenSequence> {
    let regular = vocab.regular_ids();
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=t);
            let mut ids: Vec<usize> = (0..len)
                .map(|_| regular[rng.random_range(0..regular.len())])
                .collect();
            ids.resize(t, vocab.padding_id());
            TokenSequence::from_ids(ids, vocab).unwrap()
        })
        .collect()
}

fn values(store: &lambo::params::ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, t)| t.clone()).collect()
}

fn wrap<E: std::fmt::Display>(e: E) -> TensorError {
    TensorError::ShapeMismatch {
        op: "composite",
        detail: e.to_string(),
    }
}

#[test]
pub fn nlml_gradients() {
    let t = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for probe in 0..PROBES {
        let (dae, vocab) = tiny_dae(probe as u64, t);
        let seqs = random_seqs(&mut rng, 4, t, &vocab);
        let batch = Batch::new(&seqs, &vocab).unwrap();
        let y = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let mut gp = Mtgp::new(2);
        gp.set_lengthscale(rng.random_range(0.5..1.0)).unwrap();
        gp.set_noise(&[rng.random_range(0.05..0.5), rng.random_range(0.05..0.5)]);
        gp.set_task_covariance(rand_tensor(&mut rng, &[2, 2], -1.0, 1.0), &[0.3, 0.2]);

        let gp_inputs = values(gp.params());
        assert_probe("nlml wrt gp", probe, &gp_inputs, |tp, v| {
            let p = dae.bind(tp, false);
            let z = dae.encode(tp, &p, &batch).map_err(wrap)?;
            let zp = dae.disc_encode(tp, &p, z, &batch).map_err(wrap)?;
            let f = dae.pool(tp, zp, &batch).map_err(wrap)?;
            let gv = gp.derive(tp, &Bound::new(v.to_vec())).map_err(wrap)?;
            nlml(tp, &gv, f, &y).map_err(wrap)
        });

        // The stationary kernel is blind to a shift shared by every pooled
        // feature, so the last bias has an exactly zero gradient.
        let names: Vec<&str> = dae.params().iter().map(|(n, _)| n).collect();
        let shift = names.iter().position(|n| *n == "disc.0.conv2.b").unwrap();
        let mut dae_inputs = values(dae.params());
        let frozen = dae_inputs.remove(shift);
        assert_probe("nlml wrt dae", probe, &dae_inputs, |tp, v| {
            let mut v = v.to_vec();
            v.insert(shift, tp.constant(frozen.clone()));
            let p = Bound::new(v);
            let z = dae.encode(tp, &p, &batch).map_err(wrap)?;
            let zp = dae.disc_encode(tp, &p, z, &batch).map_err(wrap)?;
            let f = dae.pool(tp, zp, &batch).map_err(wrap)?;
            let gv = gp.bind(tp, false).map_err(wrap)?;
            nlml(tp, &gv, f, &y).map_err(wrap)
        });
    }
}

#[test]
pub fn mlm_loss_gradients() {
    let t = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for probe in 0..PROBES {
        let (dae, vocab) = tiny_dae(100 + probe as u64, t);
        let seqs = random_seqs(&mut rng, 3, t, &vocab);
        let plans: Vec<CorruptionPlan> = seqs
            .iter()
            .map(|s| select_positions(s, 1, &vocab, &mut rng).unwrap())
            .collect();
        let corrupted: Vec<TokenSequence> = seqs
            .iter()
            .zip(&plans)
            .map(|(s, p)| apply_mask_corruption(s, p, &vocab))
            .collect();
        let batch = Batch::new(&corrupted, &vocab).unwrap();
        assert_probe("mlm_loss wrt dae", probe, &values(dae.params()), |tp, v| {
            let p = Bound::new(v.to_vec());
            let z = dae.encode(tp, &p, &batch).map_err(wrap)?;
            let zp = dae.disc_encode(tp, &p, z, &batch).map_err(wrap)?;
            let logits = dae.mlm_logits(tp, &p, z, zp, &batch).map_err(wrap)?;
            mlm_loss(tp, logits, &seqs, &plans).map_err(wrap)
        });
    }
}

#[test]
pub fn latent_objective_gradients() {
    let t = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for probe in 0..PROBES {
        let (dae, vocab) = tiny_dae(200 + probe as u64, t);
        let train = random_seqs(&mut rng, 6, t, &vocab);
        let y: Vec<Vec<f64>> = (0..6)
            .map(|_| vec![rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)])
            .collect();
        let mut gp = Mtgp::new(2);
        gp.set_noise(&[0.1, 0.1]);
        let surrogate = Surrogate::new(dae.clone(), gp, vocab.clone(), &train, &y).unwrap();
        let cond = surrogate.exact().conditioning().unwrap();
        let factory = NehviFactory::new(surrogate.exact(), &cond, reference_point(&y), 2);
        let acq = factory.for_restart(&mut rng, 2).unwrap();
        let bases = random_seqs(&mut rng, 2, t, &vocab);
        let (z0, plans, batch) = init_latents(&bases, &dae, &vocab, 1, &mut rng).unwrap();
        assert_probe("latent objective wrt z", probe, &[z0], |tp, v| {
            let o = inner_objective(tp, &dae, v[0], &batch, &plans, &*acq, 0.5).map_err(wrap)?;
            Ok(o.objective)
        });
    }
}
