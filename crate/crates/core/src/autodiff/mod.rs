//! Minimal reverse-mode differentiation engine: exactly the tensor ops the
//! ranking model needs, with finite-difference verification.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

pub use gradcheck::{check_all_ops, grad_check, sample_point, OpKind, SamplePoint, ALL_OPS};
pub use graph::{Gradients, Graph, Mode, NodeId};
pub use tensor::Tensor;
