//! Adversarial training with a standard-deviation-inspired (SDI) margin
//! regularizer, on small MLP softmax classifiers.
//!
//! The modules build on each other bottom-up: [`numerics`] provides tensors
//! and reverse-mode differentiation, [`model`] the classifier, [`objectives`]
//! every loss and measure, [`attacks`] the ℓ∞ adversaries, [`training`] the
//! outer optimization loops, [`data`] the datasets and [`harness`] evaluation
//! plus the command-line surface.

pub mod attacks;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
