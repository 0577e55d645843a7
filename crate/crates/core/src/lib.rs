//! Offline actor-critic training with one-step average-velocity flow
//! policies, alongside DDPM and flow-matching baselines.

pub mod autodiff;
pub mod error;
pub mod nn;
pub mod envs;
pub mod policy;
pub mod rl;

pub use error::{Error, Result};
