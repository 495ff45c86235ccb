//! Session-based reciprocal recommendation for real-time one-on-one matching.
//!
//! The crate is organized around the serving pipeline:
//!
//! - [`domain`]: users, features, match records, sessions and datasets.
//! - [`numerics`]: the differentiable kernel every model is built on.
//! - [`embedding`]: feature embedders and the causal session encoder.
//! - [`prediction`]: the projected dot-product duration head and batched
//!   pool scoring.
//! - [`training`]: two-phase training, the joint baseline and exact
//!   transformer-inference accounting.
//! - [`worldsim`]: a synthetic social-discovery world for data generation
//!   and online policy comparison.
//! - [`engine`]: embedding memory, asynchronous session updates, pool
//!   scoring and pairing, latency benchmarks.
//! - [`eval`]: metrics, match-type breakdowns, ablations and delay sweeps.
//! - [`model`]: the assembled recommender and its checkpoints.
//! - [`config`]: the merged run configuration and seed derivation.
//! - [`cli`]: the `cupid` command-line front end.

pub mod cli;
pub mod config;
pub mod domain;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod prediction;
pub mod training;
pub mod worldsim;

pub use error::{Error, Result};
