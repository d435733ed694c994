//! Ensemble machine translation with learned candidate selection.
//!
//! A Q-network scores each system of a translation pool for a source
//! sentence, the top-K systems translate, an optional correction block
//! repairs weak candidates using a pairwise-trained reward model, and a
//! fuser merges the survivors. The crate also carries the metrics, oracle
//! analyses and cost accounting needed to evaluate that pipeline.

pub mod backends;
pub mod ccb;
pub mod corpus;
pub mod dqn;
pub mod embedder;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod qnet;
pub mod reward_model;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Q-network in double precision, the default for training.
pub type QNet = qnet::QNetwork<f64>;
/// Single-precision Q-network.
pub type QNet32 = qnet::QNetwork<f32>;
/// Reward-model parameters in double precision.
pub type RmParams = reward_model::RmParams<f64>;
/// Single-precision reward-model parameters.
pub type RmParams32 = reward_model::RmParams<f32>;
