//! Off-policy actor-critic training engine built around TD3.
//!
//! The engine couples many lockstep environments with large-batch updates,
//! a twin categorical (distributional) critic with clipped double-Q targets
//! and per-environment exploration noise scales. A maximum-entropy variant
//! (`Agent::FastSac`) shares the same machinery.
//!
//! Everything runs on the CPU in-process: [`autodiff`] holds the dense
//! network kernel, [`envsuite`] the vectorized control tasks, and
//! [`trainer`] the loop that ties them together.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod distributional;
pub mod envsuite;
pub mod error;
pub mod exploration;
pub mod metrics;
pub mod networks;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
