//! Closed-form mean-field variational Bayesian inference for a family of
//! episodic latent-variable memory models, with evidence-lower-bound
//! evaluation, generation from written memory, a synthetic inference
//! benchmark, and least-squares baselines for comparison.
//!
//! Layout:
//! - [`dist`]: matrix-variate / multivariate Gaussian and categorical
//!   primitives (KL divergences, reparametrized sampling, quadratic forms).
//! - [`model`]: the five generative-model variants and their priors.
//! - [`episode`]: episode data model, synthetic generator, JSON I/O.
//! - [`engine`]: coordinate-ascent updates and the episode writer.
//! - [`elbo`]: closed-form and Monte Carlo bound evaluation, the
//!   partitioned expected-KL estimator, and the code-mean regularizer.
//! - [`baseline`]: least-squares memory writers used as comparison points.
//! - [`readout`]: direct and iterative generation from a written memory.
//! - [`bench`]: the synthetic benchmark harness behind the CLI.

pub mod baseline;
pub mod bench;
pub mod dist;
pub mod elbo;
pub mod engine;
pub mod episode;
pub mod error;
pub mod model;
pub mod readout;
pub mod verify;

pub use error::{Error, Result};
