//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{compare_with_central_differences, finite_diff_check, finite_diff_check_many, GradCheck};
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
