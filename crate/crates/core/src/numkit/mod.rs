//! Numeric building blocks: dense matrices, seeded randomness and a
//! finite-difference gradient oracle.

mod gradcheck;
mod matrix;
mod rng;

pub use gradcheck::grad_check;
pub use matrix::{Axis, Matrix, Reduction};
pub use rng::{derive_seed, Rng};
