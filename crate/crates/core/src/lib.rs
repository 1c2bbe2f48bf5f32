//! Cross-reconstruction test-time training at desk scale.
//!
//! The crate is self-contained: a dense tensor type and seeded RNG, a
//! reverse-mode autodiff tape, convolutional layers, the reconstruction /
//! classification / consistency losses, the two-encoder model with its
//! training step and per-batch test-time adaptation, a procedural
//! shape dataset with graded corruptions, and reference baselines.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
