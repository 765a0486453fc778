//! Hybrid latent variable dialogue generation.
//!
//! A desk-scale transformer encoder-decoder that mixes a continuous
//! sentence-level latent (built from per-token Gaussians by additive mixing)
//! with a trainable table of discrete latent vectors, trained by
//! self-separation over the discrete branches and an annealed (optionally
//! relaxed) KL objective. The crate also ships the supporting corpus
//! pipeline, decoding, automatic metrics, and the posterior-distance
//! analysis used to study why such models are hard to train.

pub mod error;
pub mod infer;
pub mod latent;
pub mod oracle;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
