//! Named parameter storage, the Adam update, and checkpoint files.
//!
//! # Checkpoint format (version 1)
//!
//! A UTF-8 text file:
//!
//! ```text
//! lambo-checkpoint 1
//! <tensor count>
//! <name> <ndim> <extent_0> ... <extent_{ndim-1}>
//! <value_0> <value_1> ...
//! ...
//! ```
//!
//! Each tensor occupies a header line and a value line. Values are written
//! with Rust's shortest round-trip `{:e}` formatting, so save followed by
//! load reproduces every bit and saving the same store twice gives identical
//! bytes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &str = "lambo-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = format!("{MAGIC} {VERSION}\n{}\n", self.len());
        for (name, t) in self.iter() {
            let _ = write!(out, "{name} {}", t.shape().len());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let values: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Malformed(m.to_string());
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        if header != format!("{MAGIC} {VERSION}") {
            return Err(bad("unknown header or version"));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| bad("missing tensor count"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let head = lines.next().ok_or_else(|| bad("truncated"))?;
            let mut parts = head.split(' ');
            let name = parts
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| bad("missing name"))?;
            let ndim: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("missing ndim"))?;
            let shape: Vec<usize> = parts
                .map(|s| s.parse().map_err(|_| bad("bad extent")))
                .collect::<Result<_, _>>()?;
            if shape.len() != ndim {
                return Err(bad("extent count differs from ndim"));
            }
            let vals = lines.next().ok_or_else(|| bad("missing values"))?;
            let data: Vec<f64> = if vals.is_empty() {
                Vec::new()
            } else {
                vals.split(' ')
                    .map(|s| s.parse().map_err(|_| bad("bad value")))
                    .collect::<Result<_, _>>()?
            };
            let t =
                Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            if store.index.contains_key(name) {
                return Err(bad("duplicate tensor name"));
            }
            store.insert(name, t);
        }
        Ok(store)
    }
}

/// Tape variables for a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a tape, one per parameter in store order.
    pub fn new(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects gradients for every parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `grads[i]` matches the i-th tensor of `params`;
    /// `None` entries are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] + self.weight_decay * *x;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
