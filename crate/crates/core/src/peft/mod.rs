//! Monarch sparse tuning: the Point Monarch operator, reparameterized
//! linear layers, inference-time merging, PEFT injection, and the
//! multi-layer fusion head.

mod delta;
mod fusion;
mod inject;
mod most_linear;

pub use delta::{
    point_monarch_apply, sigma_init, sparse_linear_forward, MonarchLayout, PointMonarchDelta,
};
pub use fusion::{fusion_head, mix_pool, FusionHeadConfig};
pub use inject::{
    apply_bitfit, apply_full, apply_linear_probe, inject_lora, inject_most, InjectionReport,
    TargetProj, DEFAULT_TARGETS,
};
pub use most_linear::{
    init_most, merge_deviation, most_forward, LayerMode, MergeMode, MergedLinear, MostLinear,
};
