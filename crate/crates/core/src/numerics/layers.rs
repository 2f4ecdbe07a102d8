//! Parameter containers for the affine and attention layers, and their
//! forward passes on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{Tape, Tensor};
use crate::error::{dim_err, Error, Result};

/// Weight `[out, in]` and bias `[out]` of a fully connected layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineParams {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: glorot_matrix(fan_out, fan_in, rng),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundAffine<'t>> {
        if self.bias.len() != self.fan_out() {
            return dim_err("AffineParams::bind", "bias length differs from output width");
        }
        Ok(BoundAffine {
            weight: tape.param_matrix(&self.weight)?,
            bias: tape.param(&[self.bias.len()], self.bias.clone())?,
        })
    }
}

pub(crate) fn glorot_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

/// An [`AffineParams`] whose weights live on a tape as tracked leaves.
#[derive(Debug, Clone, Copy)]
pub struct BoundAffine<'t> {
    pub weight: Tensor<'t>,
    pub bias: Tensor<'t>,
}

impl<'t> BoundAffine<'t> {
    pub fn forward(&self, x: Tensor<'t>) -> Result<Tensor<'t>> {
        x.linear(self.weight, Some(self.bias))
    }
}

/// Multi-head self-attention parameters.
///
/// The per-head projections are stored stacked: `query`, `key` and `value` are
/// `[heads * head_dim, model_dim]` (head-major), `output` is
/// `[model_dim, heads * head_dim]`. No biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub head_dim: usize,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
}

impl AttentionParams {
    pub fn glorot<R: Rng + ?Sized>(
        model_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || head_dim == 0 || model_dim == 0 {
            return Err(Error::Config("attention needs heads, head_dim and model_dim >= 1".into()));
        }
        let inner = heads * head_dim;
        Ok(Self {
            heads,
            head_dim,
            query: glorot_matrix(inner, model_dim, rng),
            key: glorot_matrix(inner, model_dim, rng),
            value: glorot_matrix(inner, model_dim, rng),
            output: glorot_matrix(model_dim, inner, rng),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.query.cols()
    }

    fn validate(&self) -> Result<()> {
        let inner = self.heads * self.head_dim;
        let m = self.model_dim();
        let ok = self.heads >= 1
            && self.head_dim >= 1
            && [&self.query, &self.key, &self.value]
                .iter()
                .all(|w| w.rows() == inner && w.cols() == m)
            && self.output.rows() == m
            && self.output.cols() == inner;
        if ok {
            Ok(())
        } else {
            dim_err("AttentionParams", "projection shapes inconsistent with heads/head_dim")
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Result<BoundAttention<'t>> {
        self.validate()?;
        Ok(BoundAttention {
            heads: self.heads,
            query: tape.param_matrix(&self.query)?,
            key: tape.param_matrix(&self.key)?,
            value: tape.param_matrix(&self.value)?,
            output: tape.param_matrix(&self.output)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention<'t> {
    pub heads: usize,
    pub query: Tensor<'t>,
    pub key: Tensor<'t>,
    pub value: Tensor<'t>,
    pub output: Tensor<'t>,
}

impl<'t> BoundAttention<'t> {
    /// Self-attention within each of `blocks` equal row groups of `x`
    /// (`[blocks * n, model_dim]`); rows of different groups never interact.
    pub fn forward_blocks(&self, x: Tensor<'t>, blocks: usize) -> Result<Tensor<'t>> {
        let q = x.linear(self.query, None)?;
        let k = x.linear(self.key, None)?;
        let v = x.linear(self.value, None)?;
        q.block_attention(k, v, blocks, self.heads)?.linear(self.output, None)
    }
}

/// Multi-head self-attention over the rows of `x: [n, model_dim]`.
pub fn multi_head_attention<'t>(params: &BoundAttention<'t>, x: Tensor<'t>) -> Result<Tensor<'t>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return dim_err("multi_head_attention", format!("expected [n, model_dim], got {shape:?}"));
    }
    if shape[0] == 0 {
        return Err(Error::EmptySet { what: "multi_head_attention" });
    }
    params.forward_blocks(x, 1)
}
