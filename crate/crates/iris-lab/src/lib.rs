//! A desk-scale laboratory for intrinsic-reward reinforcement learning on a
//! toy text-to-image policy: certainty-based per-token rewards, group
//! relative policy optimization, a programmatic reward oracle on 8x8 grid
//! images, and a deterministic experiment harness.

pub mod checkpoint;
pub mod config;
pub mod domain;
pub mod experiments;
pub mod grpo;
pub mod numerics;
pub mod policy;
pub mod rewards;
pub mod rollout;
pub mod telemetry;
