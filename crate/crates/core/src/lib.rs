//! Variance-based curriculum RL over a synthetic verifiable-reward world.
//!
//! The crate provides group reward statistics, a momentum-prioritized replay
//! bank, a tabular autoregressive policy with exact oracles, the GRPO, DAPO,
//! GSPO and variance-masked (VCRL) objectives with analytic gradients, the
//! training loop, and metric smoothing.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod group_stats;
pub mod memory_bank;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod trainer;
pub mod verify;

pub use config::{Method, TrainConfig};
pub use error::{Error, Result};
