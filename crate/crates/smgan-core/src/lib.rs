//! Structurally-sensitive multi-scale GAN for low-dose CT denoising.
//!
//! The crate is organized around a small reverse-mode differentiation engine
//! ([`graph`]) on dense f64 tensors ([`tensor`]), on top of which sit the
//! loss suite ([`loss`]), the generator/critic networks ([`nets`]), the
//! volume/patch data pipeline ([`data`]), the adversarial training loop
//! ([`train`]) and the image-quality evaluator ([`eval`]). [`gradcheck`]
//! holds the finite-difference verification suite used by tests and the
//! `smgan gradcheck` subcommand.

pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod nets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
