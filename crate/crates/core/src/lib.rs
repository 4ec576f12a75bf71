//! Physics-informed capsule encoder-decoder for underwater image enhancement,
//! with the differentiable tensor core, synthetic data pipeline, metrics and
//! training loop it needs.

pub mod ablation;
pub mod capsule;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod physics;
pub mod trainer;

pub use error::{CheckpointError, Error, PnmError, Result};
pub use losses::{LossConfig, LossReport};
pub use model::{EnhancerMode, FusionMode, ModelConfig, ModelOutput, ModelParams};
pub use numerics::{Rng, Tape, Tensor};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
