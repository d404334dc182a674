//! Masked contrastive autoencoder for cross-domain face anti-spoofing.
//!
//! The crate trains a small vision transformer in two stages: masked-image
//! reconstruction first, then reconstruction plus a domain-weighted
//! supervised contrastive term once reconstruction has converged (or a fixed
//! epoch is reached). Around that core sit leave-one-domain-out evaluation
//! protocols (HTER / AUC), a synthetic multi-domain data generator, and an
//! analysis toolkit: discrete mutual information with a data-processing
//! check, a Gaussian-likelihood/MSE equivalence report, reconstruction
//! grids, token-level class activation maps, and an exact t-SNE embedder.
//!
//! Modules mirror the pipeline: [`data`] -> [`tokenizer`] -> [`model`] ->
//! [`losses`] -> [`trainer`] -> [`eval`], with [`analysis`] alongside.
//! Everything numeric runs in `f64`; determinism is part of each operation's
//! contract (fixed seeds give bit-identical results).

#![forbid(unsafe_code)]

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use config::FullConfig;
pub use error::{Error, Result};
pub use tensor::Tensor;
