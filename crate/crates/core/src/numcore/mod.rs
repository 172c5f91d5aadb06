//! Dense matrix and 3-way tensor arithmetic with reverse-mode
//! differentiation.

pub mod linalg;
mod matrix;
pub mod tape;
mod tensor3;

pub use linalg::Cholesky;
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var};
pub use tensor3::Tensor3;
