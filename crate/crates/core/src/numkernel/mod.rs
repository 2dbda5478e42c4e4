//! Dense kernels, reverse-mode differentiation and seeded randomness.

pub mod fd;
mod matrix;
mod rng;
mod tape;

pub use fd::{fd_gradient, relative_error};
pub use matrix::{Matrix, Precision, Scalar};
pub use rng::{kaiming_uniform_init, RngStream};
pub use tape::{cross_entropy, Activation, Gradients, Op, Tape, Var};
