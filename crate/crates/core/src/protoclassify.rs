//! Prototype initialisation, the scaled-cosine classifier and its loss, the
//! support-averaged prototype gradient, and plain gradient descent on
//! prototypes as a baseline optimizer.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, Tape, Tensor};

/// Default cosine-softmax scale.
pub const DEFAULT_GAMMA: f64 = 10.0;

static CLAMPED_PROBABILITIES: AtomicUsize = AtomicUsize::new(0);

/// Number of true-class probabilities clamped by [`nll_loss`] so far.
pub fn clamp_count() -> usize {
    CLAMPED_PROBABILITIES.load(Ordering::Relaxed)
}

/// Class prototypes `p(t)` (one row per class) at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeState {
    pub prototypes: Matrix,
    pub time: f64,
}

impl PrototypeState {
    pub fn new(prototypes: Matrix, time: f64) -> Self {
        Self { prototypes, time }
    }

    pub fn n_way(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }
}

fn class_means(features: &[&Matrix], labels: &[&[usize]], n_way: usize, dim: usize) -> Result<Matrix> {
    let mut sums = Matrix::zeros(n_way, dim);
    let mut counts = vec![0usize; n_way];
    for (f, ls) in features.iter().zip(labels) {
        for (row, &l) in f.iter_rows().zip(ls.iter()) {
            counts[l] += 1;
            for (s, v) in sums.row_mut(l).iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Capacity(format!("class {k} has no samples")));
        }
        sums.row_mut(k).iter_mut().for_each(|s| *s /= c as f64);
    }
    Ok(sums)
}

/// Mean of each class's support features, at time 0.
pub fn init_prototypes(ep: &Episode) -> Result<PrototypeState> {
    let p = class_means(&[ep.support()], &[ep.support_labels()], ep.n_way(), ep.dim())?;
    Ok(PrototypeState::new(p, 0.0))
}

/// Per-class mean over support and query features. Diagnostic only.
pub fn real_prototypes(ep: &Episode) -> Result<PrototypeState> {
    let p = class_means(
        &[ep.support(), ep.query()],
        &[ep.support_labels(), ep.query_labels()],
        ep.n_way(),
        ep.dim(),
    )?;
    Ok(PrototypeState::new(p, 0.0))
}

/// Class probabilities `softmax_k(gamma * cos(f_i, p_k))` on a tape.
pub fn classify_tensor<'t>(features: Tensor<'t>, prototypes: Tensor<'t>, gamma: f64) -> Result<Tensor<'t>> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    let f = features.normalize_rows()?;
    let p = prototypes.normalize_rows()?;
    f.linear(p, None)?.scale(gamma)?.softmax(1)
}

/// Probability matrix (rows = features, columns = classes).
pub fn classify(features: &Matrix, p: &PrototypeState, gamma: f64) -> Result<Matrix> {
    let tape = Tape::new();
    let f = tape.constant_matrix(features)?;
    let protos = tape.constant_matrix(&p.prototypes)?;
    Ok(classify_tensor(f, protos, gamma)?.to_matrix())
}

/// Mean negative log-likelihood of the true labels. Probabilities below
/// [`crate::numerics::PROB_FLOOR`] are clamped and counted in [`clamp_count`].
pub fn nll_loss<'t>(probabilities: Tensor<'t>, labels: &[usize]) -> Result<Tensor<'t>> {
    let (loss, clamped) = probabilities.nll(labels)?;
    if clamped > 0 {
        CLAMPED_PROBABILITIES.fetch_add(clamped, Ordering::Relaxed);
    }
    Ok(loss)
}

/// Mean NLL of `features` under prototypes `p`.
pub fn mean_loss(features: &Matrix, labels: &[usize], p: &PrototypeState, gamma: f64) -> Result<f64> {
    let tape = Tape::new();
    let f = tape.constant_matrix(features)?;
    let protos = tape.constant_matrix(&p.prototypes)?;
    Ok(nll_loss(classify_tensor(f, protos, gamma)?, labels)?.item())
}

/// Average over labelled samples of the per-sample NLL gradient with respect
/// to the prototypes, in closed form:
/// `dL_i/dp_k = gamma (pi_ik - [k = y_i]) (f^_i - cos_ik p^_k) / |p_k|`.
pub fn averaged_gradient(p: &PrototypeState, features: &Matrix, labels: &[usize], gamma: f64) -> Result<Matrix> {
    if features.rows() == 0 {
        return Err(Error::EmptySet { what: "averaged_gradient" });
    }
    if features.cols() != p.dim() || labels.len() != features.rows() {
        return Err(Error::Dimension { op: "averaged_gradient", detail: "features, labels and prototypes disagree".into() });
    }
    let n_way = p.n_way();
    let d = p.dim();
    let pnorms: Vec<f64> = p.prototypes.iter_rows().map(norm).collect();
    if pnorms.iter().any(|&n| n == 0.0) {
        return Err(Error::DegenerateVector { what: "prototype" });
    }
    let phat: Vec<Vec<f64>> = p
        .prototypes
        .iter_rows()
        .zip(&pnorms)
        .map(|(r, n)| r.iter().map(|v| v / n).collect())
        .collect();
    let mut grad = Matrix::zeros(n_way, d);
    for (f, &y) in features.iter_rows().zip(labels) {
        let fnorm = norm(f);
        if fnorm == 0.0 {
            return Err(Error::DegenerateVector { what: "feature" });
        }
        let fhat: Vec<f64> = f.iter().map(|v| v / fnorm).collect();
        let cos: Vec<f64> = phat.iter().map(|ph| dot(&fhat, ph)).collect();
        let max = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = cos.iter().map(|c| (gamma * (c - max)).exp()).collect();
        let z: f64 = exps.iter().sum();
        for k in 0..n_way {
            let coeff = gamma * (exps[k] / z - if k == y { 1.0 } else { 0.0 }) / pnorms[k];
            for (j, g) in grad.row_mut(k).iter_mut().enumerate() {
                *g += coeff * (fhat[j] - cos[k] * phat[k][j]);
            }
        }
    }
    let n = features.rows() as f64;
    grad.as_mut_slice().iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Gradient descent on the prototypes with the support-averaged gradient:
/// `p(t+1) = p(t) - eta * grad`. Returns the final state and the support loss
/// before each step and after the last.
pub fn gda_optimize_traced(
    p0: &PrototypeState,
    support: &Matrix,
    labels: &[usize],
    eta: f64,
    steps: usize,
    gamma: f64,
) -> Result<(PrototypeState, Vec<f64>)> {
    if !(eta >= 0.0) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {eta}")));
    }
    let mut p = p0.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        losses.push(mean_loss(support, labels, &p, gamma)?);
        let g = averaged_gradient(&p, support, labels, gamma)?;
        for (x, gi) in p.prototypes.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *x -= eta * gi;
        }
        p.time += 1.0;
        if !p.prototypes.is_finite() {
            return Err(Error::Divergence { step });
        }
    }
    losses.push(mean_loss(support, labels, &p, gamma)?);
    Ok((p, losses))
}

pub fn gda_optimize(
    p0: &PrototypeState,
    support: &Matrix,
    labels: &[usize],
    eta: f64,
    steps: usize,
    gamma: f64,
) -> Result<PrototypeState> {
    if steps == 0 || eta == 0.0 {
        return Ok(PrototypeState { time: p0.time + steps as f64, ..p0.clone() });
    }
    gda_optimize_traced(p0, support, labels, eta, steps, gamma).map(|(p, _)| p)
}
