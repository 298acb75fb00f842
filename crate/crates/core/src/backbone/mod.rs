//! A small deterministic point-cloud transformer providing realistic
//! injection points for PEFT at desk scale.

pub mod checkpoint;
mod config;
mod embed;
mod model;

pub use config::ModelConfig;
pub use embed::{build_patches, PatchEmbedding};
pub use model::{ForwardMode, Model, TrainableLossOp};
