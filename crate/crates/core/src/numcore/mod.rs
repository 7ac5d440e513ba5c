//! Dense tensors, a differentiation tape, and finite-difference checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_tape, finite_diff_check, GradCheckReport, REL_FLOOR};
pub use tape::{Activation, Elementwise, Gradients, Tape, Var, PROB_EPS};
pub use tensor::Tensor;
