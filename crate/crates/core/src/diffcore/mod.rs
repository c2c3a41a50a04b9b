//! Dense matrix values with reverse-mode gradients.
//!
//! Everything the pooling model needs is expressed through the primitives on
//! [`Tape`]; fused computations such as the margin loss plug in through
//! [`CustomOp`].

mod gradcheck;
mod real;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use real::{lit, Real};
pub use tape::{CustomOp, Mat, Tape, Var, COSINE_EPS, LAYER_NORM_EPS};

#[allow(unused_imports)]
pub(crate) use tape::sigmoid;
