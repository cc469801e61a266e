//! Shadow-network parameter-efficient fine-tuning at desk scale.
//!
//! A frozen decoder-only transformer is adapted by a small trainable shadow
//! network that runs alongside it. The shadow state is built from the shared
//! embeddings, injected into every base layer through a low-rank bottleneck
//! and refreshed after each layer by a gated update. The crate also carries
//! a LoRA baseline, the cross-scale pseudo-inverse projection, synthetic
//! tasks, training and a bit-exact checkpoint format.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod crossscale;
pub mod error;
pub mod injection;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod shadow;
pub mod tasks;
pub mod training;
pub mod update;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use model::{AdaptedModel, Method};
pub use numerics::{DType, Tape, Tensor, Var};
pub use params::ParamStore;
pub use pipeline::{InferenceMode, ShadowPeftModel};
