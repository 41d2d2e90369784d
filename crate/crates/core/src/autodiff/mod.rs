//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, ABS_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
