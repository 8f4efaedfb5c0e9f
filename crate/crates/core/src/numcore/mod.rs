//! Dense tensors, differentiable primitives and the reverse-mode tape.

mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    check_gradients, check_gradients_with, rel_error, GradCheckOptions, GradCheckReport, InputCheck, FD_EPS, FD_TOL,
};
pub use ops::{sigmoid, softplus, LN_EPS};
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var, CHECK_FINITE_ENV};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
