//! Reverse-mode differentiation over a closed set of tensor primitives.
//!
//! A [`Tape`] records every primitive application together with whatever
//! the backward pass needs. [`Tape::backward`] walks the record in reverse
//! and accumulates gradients additively at fan-out. Leaves created with
//! [`Tape::leaf`] receive gradients; [`Tape::constant`] inputs do not, and
//! nodes that depend only on constants are skipped entirely.

use std::rc::Rc;

use crate::pareto;
use crate::tensor::{self, gemm, mismatch, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Swish(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        cols: Tensor,
        mask: Rc<[bool]>,
        batch: usize,
        t: usize,
        cin: usize,
        width: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    MaskedMeanPool {
        x: Var,
        mask: Rc<[bool]>,
        batch: usize,
        t: usize,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Tensor,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    Cholesky(Var),
    TriSolve {
        l: Var,
        b: Var,
        transpose: bool,
    },
    Kron(Var, Var),
    SqDist(Var, Var),
    Matern52 {
        d2: Var,
        ls: Var,
    },
    Diag(Var),
    AddDiagTiled(Var, Var),
    Hypervolume {
        points: Var,
        reference: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for a single backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is not on a path to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap()
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
    .unwrap()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = x.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn matern52_value(r: f64) -> f64 {
    let s5r = 5f64.sqrt() * r;
    (1.0 + s5r + 5.0 * r * r / 3.0) * (-s5r).exp()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        parents: &[Var],
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteValue(name));
        }
        let needs_grad = self.ng(parents);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| -x);
        self.push("neg", v, Op::Neg(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| x * c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(mismatch(
                "mul_scalar",
                format!("scalar has shape {:?}", self.shape(s)),
            ));
        }
        let c = self.value(s).item();
        let v = map(self.value(a), |x| x * c);
        self.push("mul_scalar", v, Op::MulScalar(a, s), &[a, s])
    }

    fn check_row(&self, op: &'static str, a: Var, r: Var) -> Result<(), TensorError> {
        let (_, c) = self.value(a).dims2();
        if self.shape(r).len() != 1 || self.shape(r)[0] != c {
            return Err(mismatch(
                op,
                format!("{:?} with row {:?}", self.shape(a), self.shape(r)),
            ));
        }
        Ok(())
    }

    /// Adds the vector `r` to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, TensorError> {
        self.check_row("add_row", a, r)?;
        let (_, c) = self.value(a).dims2();
        let rv = self.value(r).data();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += rv[i % c];
        }
        self.push("add_row", v, Op::AddRow(a, r), &[a, r])
    }

    /// Multiplies every row (last axis) of `a` elementwise by `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var, TensorError> {
        self.check_row("mul_row", a, r)?;
        let (_, c) = self.value(a).dims2();
        let rv = self.value(r).data();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= rv[i % c];
        }
        self.push("mul_row", v, Op::MulRow(a, r), &[a, r])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), f64::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), f64::sqrt);
        self.push("sqrt", v, Op::Sqrt(a), &[a])
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = map(self.value(a), |x| x * sigmoid(x));
        self.push("swish", v, Op::Swish(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.value(a);
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push("mean", v, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.shape(a).len() != 2 {
            return Err(mismatch("transpose", format!("{:?}", self.shape(a))));
        }
        let v = self.value(a).transpose();
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Rows of `table` (`[v, c]`) selected by `ids`, giving `[ids.len(), c]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let (rows, c) = t.dims2();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(mismatch("embedding", format!("id {bad} >= {rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![ids.len(), c], data)?;
        self.push(
            "embedding",
            v,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Same-padded 1D convolution over `[batch, t, cin]`.
    ///
    /// `w` has shape `[width * cin, cout]` (tap-major), `b` has `[cout]`, and
    /// `mask` (length `batch * t`) is `false` at padding positions. Padded
    /// inputs are zeroed before the convolution and padded outputs are zero.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, mask: Rc<[bool]>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(mismatch(
                "conv1d",
                format!("input must be [batch, t, c], got {xs:?}"),
            ));
        }
        let (batch, t, cin) = (xs[0], xs[1], xs[2]);
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] % cin != 0 || ws[0] / cin % 2 == 0 {
            return Err(mismatch(
                "conv1d",
                format!("weight {ws:?} for {cin} input channels"),
            ));
        }
        let width = ws[0] / cin;
        let cout = ws[1];
        if self.shape(b) != [cout] || mask.len() != batch * t {
            return Err(mismatch("conv1d", "bias or mask size"));
        }
        let half = (width / 2) as isize;
        let kc = width * cin;
        let xd = self.value(x).data();
        let mut cols = vec![0.0; batch * t * kc];
        for bi in 0..batch {
            for p in 0..t {
                let row = (bi * t + p) * kc;
                for k in 0..width {
                    let src = p as isize + k as isize - half;
                    if src < 0 || src >= t as isize || !mask[bi * t + src as usize] {
                        continue;
                    }
                    let s = (bi * t + src as usize) * cin;
                    cols[row + k * cin..row + (k + 1) * cin].copy_from_slice(&xd[s..s + cin]);
                }
            }
        }
        let n = batch * t;
        let mut out = vec![0.0; n * cout];
        gemm(
            n,
            kc,
            cout,
            1.0,
            &cols,
            false,
            self.value(w).data(),
            false,
            0.0,
            &mut out,
        );
        let bd = self.value(b).data();
        for r in 0..n {
            let row = &mut out[r * cout..(r + 1) * cout];
            if mask[r] {
                for (o, bb) in row.iter_mut().zip(bd) {
                    *o += bb;
                }
            } else {
                row.fill(0.0);
            }
        }
        let v = Tensor::new(vec![batch, t, cout], out)?;
        let cols = Tensor::new(vec![n, kc], cols)?;
        self.push(
            "conv1d",
            v,
            Op::Conv1d {
                x,
                w,
                b,
                cols,
                mask,
                batch,
                t,
                cin,
                width,
            },
            &[x, w, b],
        )
    }

    /// Per-row layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        self.check_row("layer_norm", x, gamma)?;
        self.check_row("layer_norm", x, beta)?;
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xv.data()[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mu) * is;
            }
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % c] + bt[i % c])
            .collect();
        let shape = xv.shape().to_vec();
        let v = Tensor::new(shape.clone(), out)?;
        let xhat = Tensor::new(shape, xhat)?;
        self.push(
            "layer_norm",
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean over unmasked positions of `[batch, t, c]`, giving `[batch, c]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: Rc<[bool]>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || mask.len() != xs[0] * xs[1] {
            return Err(mismatch(
                "masked_mean_pool",
                format!("{xs:?} with mask of {}", mask.len()),
            ));
        }
        let (batch, t, c) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; batch * c];
        for bi in 0..batch {
            let cnt = (0..t).filter(|&p| mask[bi * t + p]).count();
            if cnt == 0 {
                return Err(mismatch(
                    "masked_mean_pool",
                    format!("sequence {bi} has no unmasked positions"),
                ));
            }
            for p in (0..t).filter(|&p| mask[bi * t + p]) {
                for j in 0..c {
                    out[bi * c + j] += xd[(bi * t + p) * c + j];
                }
            }
            for j in 0..c {
                out[bi * c + j] /= cnt as f64;
            }
        }
        let v = Tensor::new(vec![batch, c], out)?;
        self.push(
            "masked_mean_pool",
            v,
            Op::MaskedMeanPool { x, mask, batch, t },
            &[x],
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = softmax_rows(self.value(x));
        self.push("softmax", v, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = log_softmax_rows(self.value(x));
        self.push("log_softmax", v, Op::LogSoftmax(x), &[x])
    }

    /// Mean categorical cross-entropy of `(row, class)` pairs against row logits.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[(usize, usize)],
    ) -> Result<Var, TensorError> {
        let (r, c) = self.value(logits).dims2();
        if targets.is_empty() || targets.iter().any(|&(i, k)| i >= r || k >= c) {
            return Err(mismatch("cross_entropy", "targets empty or out of range"));
        }
        let lsm = log_softmax_rows(self.value(logits));
        let loss = -targets
            .iter()
            .map(|&(i, k)| lsm.data()[i * c + k])
            .sum::<f64>()
            / targets.len() as f64;
        let probs = map(&lsm, f64::exp);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Gathers rows (over the flattened leading axes) of `x`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let (r, c) = xv.dims2();
        if rows.iter().any(|&i| i >= r) {
            return Err(mismatch("select_rows", "row out of range"));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(xv.row(i));
        }
        let v = Tensor::new(vec![rows.len(), c], data)?;
        self.push(
            "select_rows",
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_cols", format!("{sa:?} vs {sb:?}")));
        }
        let (r, p) = self.value(a).dims2();
        let (_, q) = self.value(b).dims2();
        let mut data = Vec::with_capacity(r * (p + q));
        for i in 0..r {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = p + q;
        let v = Tensor::new(shape, data)?;
        self.push("concat_cols", v, Op::ConcatCols(a, b), &[a, b])
    }

    /// Stacks two `[_, c]` matrices vertically.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("concat_rows", format!("{sa:?} vs {sb:?}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::new(vec![sa[0] + sb[0], sa[1]], data)?;
        self.push("concat_rows", v, Op::ConcatRows(a, b), &[a, b])
    }

    /// Lower Cholesky factor of `a + jitter * I`; `a` must be symmetric.
    pub fn cholesky(&mut self, a: Var, jitter: f64) -> Result<Var, TensorError> {
        let v = tensor::cholesky(self.value(a), jitter)?;
        self.push("cholesky", v, Op::Cholesky(a), &[a])
    }

    /// Solves `L X = B`, or `L^T X = B` when `transpose`.
    pub fn tri_solve(&mut self, l: Var, b: Var, transpose: bool) -> Result<Var, TensorError> {
        let v = tensor::tri_solve(self.value(l), self.value(b), transpose)?;
        self.push("tri_solve", v, Op::TriSolve { l, b, transpose }, &[l, b])
    }

    /// Kronecker product of two matrices.
    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(mismatch("kron", "operands must be matrices"));
        }
        let (n, m) = self.value(a).dims2();
        let (p, q) = self.value(b).dims2();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let cols = m * q;
        let mut out = vec![0.0; n * p * cols];
        for i in 0..n {
            for j in 0..m {
                let aij = ad[i * m + j];
                for k in 0..p {
                    for l in 0..q {
                        out[(i * p + k) * cols + j * q + l] = aij * bd[k * q + l];
                    }
                }
            }
        }
        let v = Tensor::new(vec![n * p, cols], out)?;
        self.push("kron", v, Op::Kron(a, b), &[a, b])
    }

    /// Pairwise squared Euclidean distances between rows of `a` and `b`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, d) = self.value(a).dims2();
        let (m, d2) = self.value(b).dims2();
        if d != d2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(mismatch(
                "sq_dist",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let v = Tensor::from_fn(n, m, |i, j| {
            self.value(a)
                .row(i)
                .iter()
                .zip(self.value(b).row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum()
        });
        self.push("sq_dist", v, Op::SqDist(a, b), &[a, b])
    }

    /// Unit-scale Matérn-5/2 kernel from squared distances and a one-element lengthscale.
    pub fn matern52(&mut self, d2: Var, ls: Var) -> Result<Var, TensorError> {
        if self.value(ls).len() != 1 {
            return Err(mismatch("matern52", "lengthscale must have one element"));
        }
        let l = self.value(ls).item();
        if !(l > 0.0) {
            return Err(mismatch("matern52", "lengthscale must be positive"));
        }
        let v = map(self.value(d2), |s| matern52_value(s.max(0.0).sqrt() / l));
        self.push("matern52", v, Op::Matern52 { d2, ls }, &[d2, ls])
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, m) = self.value(a).dims2();
        if n != m || self.shape(a).len() != 2 {
            return Err(mismatch("diag", format!("{:?}", self.shape(a))));
        }
        let v = Tensor::vector((0..n).map(|i| self.value(a).data()[i * n + i]).collect());
        self.push("diag", v, Op::Diag(a), &[a])
    }

    /// Adds `v` repeated along the diagonal: entry `(i, i)` gains `v[i % len(v)]`.
    pub fn add_diag_tiled(&mut self, a: Var, v: Var) -> Result<Var, TensorError> {
        let (n, m) = self.value(a).dims2();
        let k = self.value(v).len();
        if n != m || k == 0 || n % k != 0 {
            return Err(mismatch(
                "add_diag_tiled",
                format!("{:?} with {k}", self.shape(a)),
            ));
        }
        let mut out = self.value(a).clone();
        let vd = self.value(v).data().to_vec();
        for i in 0..n {
            out.data_mut()[i * n + i] += vd[i % k];
        }
        self.push("add_diag_tiled", out, Op::AddDiagTiled(a, v), &[a, v])
    }

    /// Dominated hypervolume (maximization) of the rows of `points`.
    pub fn hypervolume(&mut self, points: Var, reference: &[f64]) -> Result<Var, TensorError> {
        let (_, k) = self.value(points).dims2();
        if k != reference.len() || !(2..=3).contains(&k) {
            return Err(mismatch(
                "hypervolume",
                format!("k = {k}, reference of {}", reference.len()),
            ));
        }
        let rows = rows_of(self.value(points));
        let hv = pareto::hypervolume(&rows, reference)
            .map_err(|e| mismatch("hypervolume", e.to_string()))?;
        self.push(
            "hypervolume",
            Tensor::scalar(hv),
            Op::Hypervolume {
                points,
                reference: reference.to_vec(),
            },
            &[points],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => {
                *slot = Some(
                    g.reshape(self.shape(v))
                        .expect("gradient size matches value"),
                )
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, map(g, |x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Neg(a) => self.acc(grads, *a, map(g, |x| -x)),
            Op::Scale(a, c) => self.acc(grads, *a, map(g, |x| x * c)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item();
                if self.wants(*a) {
                    self.acc(grads, *a, map(g, |x| x * c));
                }
                if self.wants(*s) {
                    let d: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.acc(grads, *s, Tensor::vector(vec![d]));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*r) {
                    let c = self.value(*r).len();
                    let mut gr = vec![0.0; c];
                    for (i, x) in g.data().iter().enumerate() {
                        gr[i % c] += x;
                    }
                    self.acc(grads, *r, Tensor::vector(gr));
                }
            }
            Op::MulRow(a, r) => {
                let rv = self.value(*r).data();
                let c = rv.len();
                if self.wants(*a) {
                    let ga: Vec<f64> = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, x)| x * rv[i % c])
                        .collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), ga).unwrap());
                }
                if self.wants(*r) {
                    let mut gr = vec![0.0; c];
                    for (i, (x, av)) in g.data().iter().zip(self.value(*a).data()).enumerate() {
                        gr[i % c] += x * av;
                    }
                    self.acc(grads, *r, Tensor::vector(gr));
                }
            }
            Op::Exp(a) => self.acc(grads, *a, zip(g, y, |x, e| x * e)),
            Op::Log(a) => self.acc(grads, *a, zip(g, self.value(*a), |x, v| x / v)),
            Op::Sqrt(a) => self.acc(grads, *a, zip(g, y, |x, s| 0.5 * x / s)),
            Op::Swish(a) => self.acc(
                grads,
                *a,
                zip(g, self.value(*a), |x, v| {
                    let s = sigmoid(v);
                    x * (s + v * s * (1.0 - s))
                }),
            ),
            Op::Sum(a) => self.acc(grads, *a, Tensor::filled(self.shape(*a), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, Tensor::filled(self.shape(*a), g.item() / n))
            }
            Op::Reshape(a) => self.acc(grads, *a, g.clone()),
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        g.data(),
                        false,
                        self.value(*b).data(),
                        true,
                        0.0,
                        &mut ga,
                    );
                    self.acc(grads, *a, Tensor::vector(ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        self.value(*a).data(),
                        true,
                        g.data(),
                        false,
                        0.0,
                        &mut gb,
                    );
                    self.acc(grads, *b, Tensor::vector(gb));
                }
            }
            Op::Embedding { table, ids } => {
                let (_, c) = g.dims2();
                let mut gt = Tensor::zeros(self.shape(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * c..(id + 1) * c];
                    for (d, s) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::Conv1d {
                x,
                w,
                b,
                cols,
                mask,
                batch,
                t,
                cin,
                width,
            } => {
                let (batch, t, cin, width) = (*batch, *t, *cin, *width);
                let n = batch * t;
                let cout = y.shape()[2];
                let kc = width * cin;
                // padded outputs were forced to zero, so their gradient is dropped
                let mut gm = g.data().to_vec();
                for r in 0..n {
                    if !mask[r] {
                        gm[r * cout..(r + 1) * cout].fill(0.0);
                    }
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; kc * cout];
                    gemm(
                        kc,
                        n,
                        cout,
                        1.0,
                        cols.data(),
                        true,
                        &gm,
                        false,
                        0.0,
                        &mut gw,
                    );
                    self.acc(grads, *w, Tensor::vector(gw));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; cout];
                    for r in 0..n {
                        for (o, v) in gb.iter_mut().zip(&gm[r * cout..(r + 1) * cout]) {
                            *o += v;
                        }
                    }
                    self.acc(grads, *b, Tensor::vector(gb));
                }
                if self.wants(*x) {
                    let mut gcols = vec![0.0; n * kc];
                    gemm(
                        n,
                        cout,
                        kc,
                        1.0,
                        &gm,
                        false,
                        self.value(*w).data(),
                        true,
                        0.0,
                        &mut gcols,
                    );
                    let half = (width / 2) as isize;
                    let mut gx = vec![0.0; n * cin];
                    for bi in 0..batch {
                        for p in 0..t {
                            let row = (bi * t + p) * kc;
                            for k in 0..width {
                                let src = p as isize + k as isize - half;
                                if src < 0 || src >= t as isize || !mask[bi * t + src as usize] {
                                    continue;
                                }
                                let s = (bi * t + src as usize) * cin;
                                for c in 0..cin {
                                    gx[s + c] += gcols[row + k * cin + c];
                                }
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor::vector(gx));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.dims2();
                let gv = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (i, (a, h)) in g.data().iter().zip(xhat.data()).enumerate() {
                        gg[i % c] += a * h;
                    }
                    self.acc(grads, *gamma, Tensor::vector(gg));
                }
                if self.wants(*beta) {
                    let mut gb = vec![0.0; c];
                    for (i, a) in g.data().iter().enumerate() {
                        gb[i % c] += a;
                    }
                    self.acc(grads, *beta, Tensor::vector(gb));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let gh: Vec<f64> = (0..c).map(|j| g.data()[i * c + j] * gv[j]).collect();
                        let h = &xhat.data()[i * c..(i + 1) * c];
                        let s1: f64 = gh.iter().sum();
                        let s2: f64 = gh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] =
                                inv_std[i] / c as f64 * (c as f64 * gh[j] - s1 - h[j] * s2);
                        }
                    }
                    self.acc(grads, *x, Tensor::vector(gx));
                }
            }
            Op::MaskedMeanPool { x, mask, batch, t } => {
                let c = g.dims2().1;
                let mut gx = vec![0.0; batch * t * c];
                for bi in 0..*batch {
                    let cnt = (0..*t).filter(|&p| mask[bi * t + p]).count() as f64;
                    for p in (0..*t).filter(|&p| mask[bi * t + p]) {
                        for j in 0..c {
                            gx[(bi * t + p) * c + j] = g.data()[bi * c + j] / cnt;
                        }
                    }
                }
                self.acc(grads, *x, Tensor::vector(gx));
            }
            Op::Softmax(a) => {
                let (r, c) = y.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (&y.data()[i * c..(i + 1) * c], &g.data()[i * c..(i + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *a, Tensor::vector(gx));
            }
            Op::LogSoftmax(a) => {
                let (r, c) = y.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let s: f64 = gr.iter().sum();
                    for j in 0..c {
                        gx[i * c + j] = gr[j] - y.data()[i * c + j].exp() * s;
                    }
                }
                self.acc(grads, *a, Tensor::vector(gx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (_, c) = probs.dims2();
                let scale = g.item() / targets.len() as f64;
                let mut gx = vec![0.0; probs.len()];
                for &(i, k) in targets {
                    for j in 0..c {
                        gx[i * c + j] += scale * probs.data()[i * c + j];
                    }
                    gx[i * c + k] -= scale;
                }
                self.acc(grads, *logits, Tensor::vector(gx));
            }
            Op::SelectRows { x, rows } => {
                let (_, c) = g.dims2();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (r, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] += g.data()[r * c + j];
                    }
                }
                self.acc(grads, *x, Tensor::vector(gx));
            }
            Op::ConcatCols(a, b) => {
                let (r, p) = self.value(*a).dims2();
                let q = self.value(*b).dims2().1;
                let mut ga = Vec::with_capacity(r * p);
                let mut gb = Vec::with_capacity(r * q);
                for i in 0..r {
                    let row = &g.data()[i * (p + q)..(i + 1) * (p + q)];
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                self.acc(grads, *a, Tensor::vector(ga));
                self.acc(grads, *b, Tensor::vector(gb));
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                self.acc(grads, *a, Tensor::vector(g.data()[..na].to_vec()));
                self.acc(grads, *b, Tensor::vector(g.data()[na..].to_vec()));
            }
            Op::Cholesky(a) => {
                // A_bar = L^{-T} Phi(L^T L_bar) L^{-1}, symmetrized
                let l = y;
                let n = l.dims2().0;
                let mut p = vec![0.0; n * n];
                gemm(n, n, n, 1.0, l.data(), true, g.data(), false, 0.0, &mut p);
                for i in 0..n {
                    for j in 0..n {
                        if j > i {
                            p[i * n + j] = 0.0;
                        } else if i == j {
                            p[i * n + j] *= 0.5;
                        }
                    }
                }
                let p = Tensor::new(vec![n, n], p).unwrap();
                // X = L^{-T} P, then A_bar = X L^{-1} = (L^{-T} X^T)^T
                let x = tensor::tri_solve(l, &p, true).unwrap();
                let abar_t = tensor::tri_solve(l, &x.transpose(), true).unwrap();
                let mut sym = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        sym[i * n + j] =
                            0.5 * (abar_t.data()[i * n + j] + abar_t.data()[j * n + i]);
                    }
                }
                self.acc(grads, *a, Tensor::vector(sym));
            }
            Op::TriSolve { l, b, transpose } => {
                let lv = self.value(*l);
                let n = lv.dims2().0;
                let m = y.dims2().1;
                // B_bar = L^{-T} X_bar (or L^{-1} X_bar for the transposed solve)
                let gb = tensor::tri_solve(lv, g, !*transpose).unwrap();
                if self.wants(*l) {
                    let mut gl = vec![0.0; n * n];
                    if *transpose {
                        gemm(
                            n,
                            m,
                            n,
                            -1.0,
                            y.data(),
                            false,
                            gb.data(),
                            true,
                            0.0,
                            &mut gl,
                        );
                    } else {
                        gemm(
                            n,
                            m,
                            n,
                            -1.0,
                            gb.data(),
                            false,
                            y.data(),
                            true,
                            0.0,
                            &mut gl,
                        );
                    }
                    for i in 0..n {
                        for j in (i + 1)..n {
                            gl[i * n + j] = 0.0;
                        }
                    }
                    self.acc(grads, *l, Tensor::vector(gl));
                }
                self.acc(grads, *b, gb);
            }
            Op::Kron(a, b) => {
                let (n, m) = self.value(*a).dims2();
                let (p, q) = self.value(*b).dims2();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let cols = m * q;
                let mut ga = vec![0.0; n * m];
                let mut gb = vec![0.0; p * q];
                for i in 0..n {
                    for j in 0..m {
                        let aij = ad[i * m + j];
                        let mut s = 0.0;
                        for k in 0..p {
                            for l in 0..q {
                                let gv = g.data()[(i * p + k) * cols + j * q + l];
                                s += gv * bd[k * q + l];
                                gb[k * q + l] += gv * aij;
                            }
                        }
                        ga[i * m + j] = s;
                    }
                }
                self.acc(grads, *a, Tensor::vector(ga));
                self.acc(grads, *b, Tensor::vector(gb));
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d) = av.dims2();
                let m = bv.dims2().0;
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = av.data()[i * d + k] - bv.data()[j * d + k];
                            ga[i * d + k] += gij * diff;
                            gb[j * d + k] -= gij * diff;
                        }
                    }
                }
                self.acc(grads, *a, Tensor::vector(ga));
                self.acc(grads, *b, Tensor::vector(gb));
            }
            Op::Matern52 { d2, ls } => {
                let l = self.value(*ls).item();
                let s5 = 5f64.sqrt();
                let mut gd = vec![0.0; g.len()];
                let mut gl = 0.0;
                for (i, &dd) in self.value(*d2).data().iter().enumerate() {
                    let r = dd.max(0.0).sqrt() / l;
                    let e = (1.0 + s5 * r) * (-s5 * r).exp();
                    // dk/d(d2) = -(5 / (6 l^2)) (1 + sqrt5 r) exp(-sqrt5 r)
                    gd[i] = -g.data()[i] * 5.0 / (6.0 * l * l) * e;
                    // dk/dl = (5/3) r^2 (1 + sqrt5 r) exp(-sqrt5 r) / l
                    gl += g.data()[i] * 5.0 / 3.0 * r * r * e / l;
                }
                self.acc(grads, *d2, Tensor::vector(gd));
                self.acc(grads, *ls, Tensor::vector(vec![gl]));
            }
            Op::Diag(a) => {
                let n = g.len();
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    ga[i * n + i] = g.data()[i];
                }
                self.acc(grads, *a, Tensor::vector(ga));
            }
            Op::AddDiagTiled(a, v) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*v) {
                    let n = g.dims2().0;
                    let k = self.value(*v).len();
                    let mut gv = vec![0.0; k];
                    for i in 0..n {
                        gv[i % k] += g.data()[i * n + i];
                    }
                    self.acc(grads, *v, Tensor::vector(gv));
                }
            }
            Op::Hypervolume { points, reference } => {
                let rows = rows_of(self.value(*points));
                let grad =
                    pareto::hypervolume_gradient(&rows, reference).expect("validated in forward");
                let gp: Vec<f64> = grad.into_iter().flatten().map(|v| v * g.item()).collect();
                self.acc(grads, *points, Tensor::vector(gp));
            }
        }
    }
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unrelated_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let z = tape.leaf(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(z).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = exp(x) + x^2 -> dy/dx = exp(x) + 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5]));
        let e = tape.exp(x).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(e, sq).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!((g.get(x).item() - (0.5f64.exp() + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0]));
        assert_eq!(tape.log(x), Err(TensorError::NonFiniteValue("log")));
    }

    #[test]
    fn identity_conv_copies_unmasked_rows() {
        let (t, c) = (5, 3);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..t * c).map(|i| i as f64 + 1.0).collect();
        let x = tape.leaf(Tensor::new(vec![1, t, c], data.clone()).unwrap());
        let width = 5;
        let mut w = Tensor::zeros(&[width * c, c]);
        for j in 0..c {
            w.data_mut()[(2 * c + j) * c + j] = 1.0;
        }
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[c]));
        let mask: Rc<[bool]> = vec![true, true, true, false, false].into();
        let y = tape.conv1d(x, w, b, mask).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[..3 * c], &data[..3 * c]);
        assert!(out[3 * c..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 4], 3.0));
        let g = tape.constant(Tensor::filled(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 7], 0.3));
        let y = tape.softmax(x).unwrap();
        assert!(tape
            .value(y)
            .data()
            .iter()
            .all(|v| (v - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::matrix(2, 2, vec![0.3, -0.1, 0.7, 0.2]).unwrap());
            let b = tape.matmul(a, a).unwrap();
            let c = tape.swish(b).unwrap();
            let l = tape.sum(c).unwrap();
            tape.backward(l).unwrap().get(a)
        };
        assert_eq!(run().data(), run().data());
    }
}
