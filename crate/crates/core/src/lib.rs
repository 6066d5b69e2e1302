//! Self-paced contrastive learning with a hybrid prototype memory.
//!
//! The crate alternates density clustering of a target-domain instance
//! memory with reliability filtering and contrastive training of a small
//! MLP encoder against source class centroids, target cluster centroids and
//! target outlier instances. Everything runs on synthetic vector datasets
//! produced by [`synth`].

pub mod ablation;
pub mod clustering;
pub mod config;
pub mod data;
pub mod distance;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod feature;
pub mod loss;
pub mod memory;
pub mod rng;
pub mod selfpaced;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use feature::FeatureVector;
