//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod kernels;
pub mod gradcheck;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod suite;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use nn::{BatchNormStats, Mode};
pub use rng::SeededRng;
pub use tape::{CustomBackward, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
