//! Tabular laboratory for group-relative policy optimization.
//!
//! A small autoregressive softmax policy, synthetic verifiable-reward tasks
//! and exact gradients for vanilla policy gradient, PPO-style clipped
//! surrogates, group-relative optimization at any group size (including the
//! two-rollout case) and direct preference optimization, together with
//! Monte-Carlo and finite-difference checks of their statistical properties.

pub mod advantage;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use error::{LabError, Result};
