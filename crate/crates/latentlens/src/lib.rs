//! latentlens: confidence-stratified latent-space analysis for deterministic
//! diffusion on analytic Gaussian-mixture testbeds.
//!
//! The data distribution is a Gaussian mixture whose classes are groups of
//! components, so the time-t marginals, score, and Bayes class posterior of
//! the variance-preserving diffusion are available in closed form. On top of
//! that sit, in dependency order:
//!
//! - [`gmm`]: mixtures, noise schedules, score/divergence/posterior.
//! - [`flow`]: the probability-flow ODE (deterministic generator and its
//!   inverse), log-det accumulation, a stochastic reverse sampler as control,
//!   and numerical verifiers for the density identity and class transport.
//! - [`pool`]: balanced, confidence-stratified seed pools with lossless CSV
//!   persistence.
//! - [`learn`]: latent classifiers (MLP, linear discriminant), cross-level
//!   accuracy matrices, and the accuracy-vs-predicted-confidence diagnostic.
//! - [`structure`]: LDA/PCA separability metrics, deterministic 2D
//!   embeddings, and the low-onto-high confidence overlay.
//! - [`condgen`]: confidence-filtered conditional generation.
//! - [`config`], [`manifest`], [`svg`]: experiment-driver plumbing.
//!
//! Everything is deterministic given the experiment config and master seed:
//! all randomness flows through counter-based substreams ([`rng`]), so
//! results are independent of worker count and rebuilds are bit-identical.

pub mod condgen;
pub mod config;
pub mod error;
pub mod flow;
pub mod gmm;
pub mod learn;
pub mod manifest;
pub mod pool;
pub mod presets;
pub mod rng;
pub mod stats;
pub mod structure;
pub mod svg;

pub use error::{Error, Result};
