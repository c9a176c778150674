//! Minimal reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{cosine, log_softmax, softmax, Gradients, Graph, NodeId, COSINE_EPS};
pub use tensor::{argmax, Tensor};
pub(crate) use tensor::{dot, l2_norm};
