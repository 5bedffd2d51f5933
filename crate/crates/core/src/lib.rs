// `!(x > 0.0)` also rejects NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{GradientTape, Gradients, Var};
pub use tensor::Tensor;
pub mod backbone;
pub mod harness;
mod nn;
pub mod numerics;
pub mod prompt;
pub mod train;
