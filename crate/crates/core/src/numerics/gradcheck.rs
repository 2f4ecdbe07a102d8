//! Central finite-difference oracle for checking reverse-mode adjoints.

use super::tape::{Tape, Tensor};
use crate::error::Result;

/// One input of a checked function: its shape and values.
#[derive(Debug, Clone)]
pub struct Input {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Input {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        Self { shape: shape.to_vec(), values }
    }
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Evaluates `f` on fresh tapes and compares reverse-mode gradients of its
/// scalar output against central differences with step `h`. Returns the
/// worst relative error over all inputs.
pub fn check<F>(inputs: &[Input], h: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>>,
{
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let ts = inputs
            .iter()
            .zip(vals)
            .map(|(inp, v)| tape.constant(&inp.shape, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&tape, &ts)?.item())
    };

    let tape = Tape::new();
    let ts = inputs
        .iter()
        .map(|inp| tape.param(&inp.shape, inp.values.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &ts)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|i| i.values.clone()).collect();
    for (j, t) in ts.iter().enumerate() {
        let analytic = grads.wrt(*t);
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = vals[j][e];
            vals[j][e] = orig + h;
            let up = eval(&vals)?;
            vals[j][e] = orig - h;
            let down = eval(&vals)?;
            vals[j][e] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
