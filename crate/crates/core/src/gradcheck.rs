//! Central finite-difference checks for tape gradients.

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` per input.
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
///
/// `f` builds a scalar on the tape from one variable per entry of `inputs`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let mut numeric = vec![0.0; inputs[idx].len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[idx].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        relative_errors.push(relative_error(analytic.data(), &numeric));
    }
    Ok(GradCheck { relative_errors })
}
