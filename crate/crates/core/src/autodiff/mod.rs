//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive in creation order, so inputs always
//! precede the nodes that consume them and a single reverse sweep visits each
//! node once. Tapes are rebuilt per minibatch and confined to one thread.

mod adam;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, Param};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;
pub(crate) use tensor::matmul_into;
