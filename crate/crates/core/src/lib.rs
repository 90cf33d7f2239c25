//! Learning stochastic multi-label policies from bandit feedback logged by
//! several policies at once.

pub mod bandit;
pub mod bounds;
pub mod data;
pub mod divergence;
mod error;
pub mod estimators;
pub mod experiment;
pub mod oracle;
pub mod policy;
pub mod train;

pub use error::{CoreError, Result};
