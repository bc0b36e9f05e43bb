//! Dense matrices, reverse-mode gradients and a finite-difference checker.

mod functions;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use functions::{cosine, softmax_row, softplus, COSINE_EPS};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{Gradients, ParamId, ParamLeaf, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
