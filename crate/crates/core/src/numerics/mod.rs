//! Tensors and reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use tape::{Gradients, Reduce, Tape, Var};
pub use tensor::Tensor;
