//! Desk-scale laboratory for geometric-mean (GMPO) versus arithmetic-mean
//! (GRPO) clipped policy optimization, with exact gradients on a tabular
//! softmax policy.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod objectives;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod telemetry;
pub mod trainer;

pub use error::{Error, Result};
