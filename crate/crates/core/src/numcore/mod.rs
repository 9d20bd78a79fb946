//! Dense tensors, tape autodiff, seeded randomness and gradient checking.

mod gradcheck;
mod graph;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, Probe};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use tensor::{
    concat_tokens, gelu, layer_norm, matmul, softmax, split_tokens, transpose, Tensor,
};
