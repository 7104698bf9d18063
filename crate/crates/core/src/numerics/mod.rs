//! Dense `f64` tensors with reverse-mode automatic differentiation.

mod gradcheck;
pub(crate) mod kernel;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use ops::{pool_window, COSINE_EPS, LAYER_NORM_EPS};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
