//! Prompt-only image restoration on a frozen flow-matching prior.
//!
//! A small velocity network is pretrained on synthetic shapes and frozen.
//! Restoration is then learned purely through the conditioning context,
//! optimized along one of three state trajectories (naive, DDBM bridge,
//! EBR bridge) and sampled with a matching deterministic sampler.

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bridges;
pub mod checkpoint;
mod error;
pub mod evaluation;
pub mod numerics;
pub mod prompts;
pub mod sampler;
pub mod toyworld;
pub mod training;

pub use backbone::{Backbone, BackboneConfig};
pub use bridges::{Trajectory, TrajectoryKind};
pub use error::{Error, Result};
pub use numerics::{NamedTensors, Tensor};
pub use prompts::{Conditioner, ConditionerConfig, Prompt, PromptBank, VariantTag};
pub use sampler::{Restoration, SamplerConfig};
pub use toyworld::{Degradation, DegradationKind, PairedSample};
pub use training::{TrainConfig, TrainReport};
