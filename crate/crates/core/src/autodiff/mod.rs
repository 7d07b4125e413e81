//! Tape-based reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor).

pub mod kernels;
mod tape;

pub use tape::{Gradients, Operator, Tape, Var, GROUP_NORM_EPS};
#[allow(unused_imports)]
pub(crate) use tape::avg_pool2x_data;
