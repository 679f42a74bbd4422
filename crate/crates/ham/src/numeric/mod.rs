//! Dense tensors and reverse-mode differentiation.

pub mod tape;
pub mod tensor;

pub use tape::{Gradients, Tape, VarId};
pub use tensor::{affine, cosine, kl_divergence, softmax, Tensor};
