//! Continual-learning laboratory built around the discriminative
//! representation loss (DRL).
//!
//! The crate bundles a small dense network with exact backpropagation, the
//! pairwise representation losses, class-balanced replay, gradient-space
//! baselines (A-GEM, GSS), evaluation metrics, a numerical lab for the
//! gradient/representation sign identities, dataset ingestion and a
//! config-driven experiment runner.

pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use nn::{Activation, ForwardTrace, GradientVector, MlpModel, RepresentationTap};
pub use tensor::Tensor2;
