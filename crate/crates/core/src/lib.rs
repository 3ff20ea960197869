//! Hierarchical semi-Markov conditional random fields: exact inference,
//! Rao-Blackwellised Gibbs sampling over transition levels, supervised
//! training and a generative simulator for experiments.

// Dense table code reads more clearly with explicit index loops.
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod dataset;
pub mod error;
pub mod exact;
pub mod experiments;
pub mod logspace;
pub mod marginals;
pub mod metrics;
pub mod model;
pub mod rbgs;
pub mod simulator;
pub mod topology;
pub mod training;
pub mod tree;
mod walking;

pub use error::{Error, Result};
pub use walking::{walking_log_sum, walking_state_marginals};
