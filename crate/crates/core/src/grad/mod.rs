//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tape`] records an eagerly evaluated computation; [`Tape::backward`]
//! walks the record in reverse, accumulating gradients into every node.
//! Only the operations the duration model needs are provided, all in f64.

pub mod check;
mod tape;
mod tensor;

pub use tape::{PadMode, Tape, Var};
pub use tensor::Tensor;
