//! Tensor core: storage, reverse-mode tape, linear algebra and the
//! finite-difference oracle.

mod gradcheck;
mod linalg;
pub mod rng;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradient, compare, grad_check, numeric_gradient, relative_error, GradCheckReport, DEFAULT_STEP,
};
pub(crate) use linalg::pinv_matrix;
pub use linalg::{from_matrix, pinv, to_matrix, DEFAULT_RCOND};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Tensor};

/// Default LayerNorm epsilon.
pub const LN_EPS: f64 = 1e-5;
