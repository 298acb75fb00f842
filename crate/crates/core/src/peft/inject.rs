//! PEFT injection: wrap chosen projections of a frozen backbone with
//! trainable Point Monarch deltas (or LoRA factors for the baseline), and
//! the trainable-set selectors for the selective baselines.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::structured::BlockScheme;
use crate::tensor::Tensor;

use super::delta::MonarchLayout;

/// Projections eligible for reparameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetProj {
    /// Fused query/key/value projection, treated as one rectangular layer.
    Qkv,
    /// Attention output projection.
    Proj,
    Fc1,
    Fc2,
}

impl TargetProj {
    pub fn suffix(self) -> &'static str {
        match self {
            TargetProj::Qkv => "attn.qkv",
            TargetProj::Proj => "attn.proj",
            TargetProj::Fc1 => "ffn.fc1",
            TargetProj::Fc2 => "ffn.fc2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "qkv" => Ok(TargetProj::Qkv),
            "proj" => Ok(TargetProj::Proj),
            "fc1" => Ok(TargetProj::Fc1),
            "fc2" => Ok(TargetProj::Fc2),
            other => Err(Error::config(format!("unknown target projection `{other}`"))),
        }
    }

    pub fn all() -> [TargetProj; 4] {
        [TargetProj::Qkv, TargetProj::Proj, TargetProj::Fc1, TargetProj::Fc2]
    }
}

/// Default reparameterization targets: the attention QKV projection and the
/// two feed-forward projections.
pub const DEFAULT_TARGETS: [TargetProj; 3] = [TargetProj::Qkv, TargetProj::Fc1, TargetProj::Fc2];

fn block_prefixes(store: &ParamStore, targets: &[TargetProj]) -> Result<Vec<(String, usize, usize)>> {
    let mut out = Vec::new();
    let mut block = 0usize;
    loop {
        let probe = format!("blocks.{block}.attn.qkv.weight");
        if !store.contains(&probe) {
            break;
        }
        for t in targets {
            let prefix = format!("blocks.{block}.{}", t.suffix());
            let wname = format!("{prefix}.weight");
            let w = store
                .get(&wname)
                .map_err(|_| Error::config(format!("target `{wname}` is not a dense linear")))?;
            out.push((prefix, w.shape()[0], w.shape()[1]));
        }
        block += 1;
    }
    if block == 0 && !targets.is_empty() {
        return Err(Error::config("model has no transformer blocks to inject into"));
    }
    Ok(out)
}

/// Counts reported by an injection.
#[derive(Debug, Clone, Copy)]
pub struct InjectionReport {
    /// Scalars added for the update parameterization (λ's included).
    pub adapter_scalars: usize,
    /// Scalars of the trainable task head.
    pub head_scalars: usize,
    /// Total trainable scalars after injection.
    pub trainable_scalars: usize,
}

/// Freeze the backbone and wrap every `targets` projection of every block
/// with a trainable Point Monarch delta. The task head stays trainable; an
/// empty target set therefore degenerates to linear probing.
pub fn inject_most(
    store: &mut ParamStore,
    targets: &[TargetProj],
    b: usize,
    scheme: BlockScheme,
    seed: u64,
) -> Result<InjectionReport> {
    let resolved = block_prefixes(store, targets)?;
    store.freeze_all();
    let rng = Rng::seed_from_u64(seed);
    let mut adapter_scalars = 0;
    for (prefix, d_in, d_out) in &resolved {
        let layout = MonarchLayout::new(*d_in, *d_out, b, scheme)?;
        let mut stream = rng.derive(hash_name(prefix));
        layout.init_params(store, prefix, &mut stream)?;
        adapter_scalars += layout.delta_param_count();
    }
    let head_scalars = unfreeze_head(store);
    Ok(InjectionReport {
        adapter_scalars,
        head_scalars,
        trainable_scalars: store.trainable_scalar_count(),
    })
}

/// LoRA baseline: `ΔW = A·B` with `A (d_in×r) ~ N(0, 1/√d_in)`, `B = 0`.
pub fn inject_lora(
    store: &mut ParamStore,
    targets: &[TargetProj],
    rank: usize,
    seed: u64,
) -> Result<InjectionReport> {
    if rank == 0 {
        return Err(Error::config("LoRA rank must be ≥ 1"));
    }
    let resolved = block_prefixes(store, targets)?;
    store.freeze_all();
    let rng = Rng::seed_from_u64(seed);
    let mut adapter_scalars = 0;
    for (prefix, d_in, d_out) in &resolved {
        if rank > (*d_in).min(*d_out) {
            return Err(Error::config(format!(
                "LoRA rank {rank} exceeds min dim of `{prefix}`"
            )));
        }
        let mut stream = rng.derive(hash_name(prefix));
        let sigma = 1.0 / (*d_in as f64).sqrt();
        store.insert(
            format!("{prefix}.lora.a"),
            Tensor::gaussian(&[*d_in, rank], sigma, &mut stream),
            true,
        )?;
        store.insert(format!("{prefix}.lora.b"), Tensor::zeros(&[rank, *d_out]), true)?;
        adapter_scalars += rank * (d_in + d_out);
    }
    let head_scalars = unfreeze_head(store);
    Ok(InjectionReport {
        adapter_scalars,
        head_scalars,
        trainable_scalars: store.trainable_scalar_count(),
    })
}

/// Selective baseline: only bias-like tensors (`.bias`, layernorm `.beta`)
/// plus the task head train.
pub fn apply_bitfit(store: &mut ParamStore) -> usize {
    store.freeze_all();
    store.set_trainable_where(
        |name| name.ends_with(".bias") || name.ends_with(".beta"),
        true,
    );
    unfreeze_head(store);
    store.trainable_scalar_count()
}

/// Linear probing: only the task head trains.
pub fn apply_linear_probe(store: &mut ParamStore) -> usize {
    store.freeze_all();
    unfreeze_head(store);
    store.trainable_scalar_count()
}

/// Full fine-tuning: everything trains.
pub fn apply_full(store: &mut ParamStore) -> usize {
    store.set_trainable_where(|_| true, true);
    store.trainable_scalar_count()
}

fn unfreeze_head(store: &mut ParamStore) -> usize {
    store.set_trainable_where(|name| name.starts_with("head."), true);
    store
        .entries()
        .iter()
        .filter(|e| e.name.starts_with("head."))
        .map(|e| e.tensor.numel())
        .sum()
}

/// Stable FNV-1a hash used to derive per-layer init streams.
pub(crate) fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
