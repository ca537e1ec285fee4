//! Dense tensors, a reverse-mode tape and a gradient oracle.
//!
//! Everything is `f64`. Tensors are immutable once recorded; a tape and its
//! values belong to a single thread, while independent tapes can run on
//! separate threads.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use tape::{ElementwiseOp, ReduceOp, Tape, Var};
pub use tensor::Tensor;
