//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar sweeps the record in reverse and
//! accumulates gradients into the leaves created with [`Tape::param`].
//! Only scalar-to-tensor broadcasting is supported for elementwise ops; bias
//! addition goes through the dedicated [`Var::add_row`].

mod tape;
mod tensor;

pub use tape::{softmax_rows, Tape, Var};
pub use tensor::Tensor;
