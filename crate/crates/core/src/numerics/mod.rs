//! Dense tensors with reverse-mode differentiation, and the neural building
//! blocks used by the gradient-flow network.

pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod matrix;
pub mod tape;

pub use layers::{multi_head_attention, AffineParams, AttentionParams, BoundAffine, BoundAttention};
pub use matrix::{cosine, dot, norm, Matrix};
pub use tape::{elu, Gradients, Tape, Tensor, PROB_FLOOR};
