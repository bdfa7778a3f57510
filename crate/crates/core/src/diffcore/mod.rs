//! Dense matrices and reverse-mode gradients.

mod matrix;
mod norm;
mod tape;

pub use matrix::{Elementwise, Matrix};
pub use norm::{batchnorm, BatchNorm, NormMode, BN_EPS, BN_MOMENTUM};
pub use tape::{evaluate_with_gradients, BatchStats, Tape, Var};
