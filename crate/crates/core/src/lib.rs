//! Differentiable closed-form base learners for episodic few-shot learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode differentiation graph.
//! - [`solvers`]: ridge regression (direct, Woodbury and per-feature
//!   regularisation), output calibration, and IRLS logistic regression.
//! - [`episodes`]: datasets, class splits, N-way/K-shot episode sampling,
//!   synthetic task generators and the on-disk dataset format.
//! - [`embed`]: the shared multilayer-perceptron feature extractor.
//! - [`meta`]: episode losses, Adam, the outer training loop, evaluation,
//!   comparison heads, checkpoints and metrics.

pub mod episodes;
pub mod embed;
pub mod error;
pub mod meta;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
