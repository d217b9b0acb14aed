//! Reverse-mode differentiation over dense tensors.

mod check;
mod tape;
mod tensor;

pub use check::{check_gradients, check_param_gradients, relative_error};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
