//! The toy point-cloud transformer: patch embedding, pre-norm attention
//! blocks with GELU FFNs, multi-layer fusion, and a linear classifier.
//!
//! Every forward pass is built on a fresh [`Tape`]. Linear layers consult
//! the parameter store for attached Point Monarch deltas or LoRA factors by
//! name, so a checkpoint fully describes the model including its PEFT
//! state.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{ops, DifferentiableOp, Tape, ValueId};
use crate::error::{Error, Result};
use crate::geometry::{KnnGraph, PointCloud};
use crate::params::ParamStore;
use crate::peft::MonarchLayout;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::embed::{build_patches, PatchEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Base weights plus live PEFT subgraphs; the training path.
    Train,
    /// Deltas applied through their materialized dense update with the two
    /// token mixes kept; reproduces the training forward.
    MergedExact,
    /// Deltas and LoRA factors folded into the base weights, token mixes
    /// dropped; a single dense matmul per linear, exact iff λ = 0.
    MergedDropK,
}

fn hash_name(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

enum Init {
    Xavier,
    Zeros,
    Ones,
    /// Small-scale init for the class token and the task head, keeping
    /// initial logits near zero.
    Small,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Ordered `(name, shape)` of every base (non-PEFT) parameter.
    pub fn base_param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Self::base_specs_with_init(cfg)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect()
    }

    fn base_specs_with_init(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
        let c = cfg.embed_dim;
        let f = cfg.ffn_dim();
        let mut specs: Vec<(String, Vec<usize>, Init)> = vec![
            ("patch_embed.mlp1.weight".into(), vec![3, c], Init::Xavier),
            ("patch_embed.mlp1.bias".into(), vec![c], Init::Zeros),
            ("patch_embed.mlp2.weight".into(), vec![c, c], Init::Xavier),
            ("patch_embed.mlp2.bias".into(), vec![c], Init::Zeros),
            ("class_token".into(), vec![c], Init::Small),
        ];
        for i in 0..cfg.depth {
            specs.push((format!("blocks.{i}.ln1.gamma"), vec![c], Init::Ones));
            specs.push((format!("blocks.{i}.ln1.beta"), vec![c], Init::Zeros));
            specs.push((format!("blocks.{i}.attn.qkv.weight"), vec![c, 3 * c], Init::Xavier));
            specs.push((format!("blocks.{i}.attn.qkv.bias"), vec![3 * c], Init::Zeros));
            specs.push((format!("blocks.{i}.attn.proj.weight"), vec![c, c], Init::Xavier));
            specs.push((format!("blocks.{i}.attn.proj.bias"), vec![c], Init::Zeros));
            specs.push((format!("blocks.{i}.ln2.gamma"), vec![c], Init::Ones));
            specs.push((format!("blocks.{i}.ln2.beta"), vec![c], Init::Zeros));
            specs.push((format!("blocks.{i}.ffn.fc1.weight"), vec![c, f], Init::Xavier));
            specs.push((format!("blocks.{i}.ffn.fc1.bias"), vec![f], Init::Zeros));
            specs.push((format!("blocks.{i}.ffn.fc2.weight"), vec![f, c], Init::Xavier));
            specs.push((format!("blocks.{i}.ffn.fc2.bias"), vec![c], Init::Zeros));
        }
        specs.push(("norm_f.gamma".into(), vec![c], Init::Ones));
        specs.push(("norm_f.beta".into(), vec![c], Init::Zeros));
        specs.push(("head.weight".into(), vec![cfg.head_in_dim(), cfg.classes], Init::Small));
        specs.push(("head.bias".into(), vec![cfg.classes], Init::Zeros));
        specs
    }

    /// Prefixes of every injectable linear projection.
    pub fn linear_prefixes(cfg: &ModelConfig) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..cfg.depth {
            out.push(format!("blocks.{i}.attn.qkv"));
            out.push(format!("blocks.{i}.attn.proj"));
            out.push(format!("blocks.{i}.ffn.fc1"));
            out.push(format!("blocks.{i}.ffn.fc2"));
        }
        out
    }

    fn init_tensor(shape: &[usize], init: &Init, stream: &mut Rng) -> Tensor {
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, 1.0),
            Init::Small => Tensor::gaussian(shape, 0.02, stream),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape.len() {
                    2 => (shape[0], shape[1]),
                    _ => (shape[0], shape[0]),
                };
                let sigma = (2.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::gaussian(shape, sigma, stream)
            }
        }
    }

    /// Fresh model; all parameters trainable. Each tensor draws from a
    /// stream derived from the run seed and its own name.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, init) in Self::base_specs_with_init(&cfg) {
            let mut stream = root.derive(hash_name(&name));
            let t = Self::init_tensor(&shape, &init, &mut stream);
            params.insert(name, t, true)?;
        }
        Ok(Self { cfg, params })
    }

    /// Wrap an existing parameter store, validating every base parameter's
    /// presence and shape and rejecting unrecognized tensor names.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut known: Vec<String> = Vec::new();
        for (name, shape) in Self::base_param_specs(&cfg) {
            let t = params.get(&name).map_err(|_| {
                Error::Format(format!("checkpoint missing tensor `{name}`"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            known.push(name);
        }
        let prefixes = Self::linear_prefixes(&cfg);
        for entry in params.entries() {
            let name = &entry.name;
            if known.iter().any(|k| k == name) {
                continue;
            }
            let recognized = prefixes.iter().any(|p| {
                name.starts_with(&format!("{p}.delta.")) || name.starts_with(&format!("{p}.lora."))
            });
            if !recognized {
                return Err(Error::Format(format!("unknown tensor name `{name}`")));
            }
        }
        Ok(Self { cfg, params })
    }

    /// Swap in a freshly initialized head for a new class count.
    pub fn replace_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        self.cfg.classes = classes;
        let root = Rng::seed_from_u64(seed);
        let mut stream = root.derive(hash_name("head.weight"));
        let w = Self::init_tensor(&[self.cfg.head_in_dim(), classes], &Init::Small, &mut stream);
        self.params.replace("head.weight", w)?;
        self.params.replace("head.bias", Tensor::zeros(&[classes]))?;
        Ok(())
    }

    fn make_leaves(&self, tape: &mut Tape, for_training: bool) -> HashMap<String, ValueId> {
        let mut leaves = HashMap::with_capacity(self.params.entries().len());
        for e in self.params.entries() {
            let id = if for_training && e.trainable {
                tape.param(e.tensor.clone())
            } else {
                tape.constant(e.tensor.clone())
            };
            leaves.insert(e.name.clone(), id);
        }
        leaves
    }

    pub fn forward_classify(&self, cloud: &PointCloud, mode: ForwardMode) -> Result<Tensor> {
        let embed = build_patches(cloud, &self.cfg)?;
        self.logits_from_embedding(&embed, mode)
    }

    /// Logits from a precomputed patch embedding (the training loop caches
    /// embeddings per sample).
    pub fn logits_from_embedding(&self, embed: &PatchEmbedding, mode: ForwardMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let leaves = self.make_leaves(&mut tape, false);
        let logits = self.build_logits(&mut tape, &leaves, embed, mode)?;
        Ok(tape.value(logits).clone())
    }

    /// Patch-token features at the last block's output, with the graph they
    /// were computed under; the smoothing diagnostic reads these.
    pub fn final_block_features(
        &self,
        embed: &PatchEmbedding,
        mode: ForwardMode,
    ) -> Result<(Tensor, Arc<KnnGraph>)> {
        let mut tape = Tape::new();
        let leaves = self.make_leaves(&mut tape, false);
        let (_, block_outputs) = self.build_graph(&mut tape, &leaves, embed, mode)?;
        let last = *block_outputs.last().expect("depth ≥ 1");
        let full = tape.value(last);
        let c = self.cfg.embed_dim;
        let g = self.cfg.patches;
        let feats = Tensor::new(vec![g, c], full.data()[c..].to_vec())?;
        Ok((feats, Arc::clone(&embed.graph)))
    }

    /// Token-level entry: run the transformer stack on prepared tokens.
    pub fn forward_from_tokens(
        &self,
        tokens: &Tensor,
        graph: Arc<KnnGraph>,
        mode: ForwardMode,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let leaves = self.make_leaves(&mut tape, false);
        let tokens_id = tape.constant(tokens.clone());
        let logits = self.stack_from_tokens(&mut tape, &leaves, tokens_id, &graph, mode)?;
        Ok(tape.value(logits).clone())
    }

    pub fn loss(&self, cloud: &PointCloud, label: usize, mode: ForwardMode) -> Result<f64> {
        let embed = build_patches(cloud, &self.cfg)?;
        let mut tape = Tape::new();
        let leaves = self.make_leaves(&mut tape, false);
        let logits = self.build_logits(&mut tape, &leaves, &embed, mode)?;
        let loss = ops::cross_entropy(&mut tape, logits, label)?;
        Ok(tape.value(loss).item())
    }

    /// Loss and gradients for every trainable parameter on one sample.
    pub fn loss_and_grads(
        &self,
        embed: &PatchEmbedding,
        label: usize,
    ) -> Result<(f64, HashMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let leaves = self.make_leaves(&mut tape, true);
        let logits = self.build_logits(&mut tape, &leaves, embed, ForwardMode::Train)?;
        let loss = ops::cross_entropy(&mut tape, logits, label)?;
        let loss_value = tape.value(loss).item();
        let mut grads_by_id = tape.backward(loss)?;
        let mut grads = HashMap::new();
        for e in self.params.entries() {
            if !e.trainable {
                continue;
            }
            let id = leaves[&e.name];
            let g = grads_by_id
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(e.tensor.shape()));
            grads.insert(e.name.clone(), g);
        }
        Ok((loss_value, grads))
    }

    pub fn build_embedding(&self, cloud: &PointCloud) -> Result<PatchEmbedding> {
        build_patches(cloud, &self.cfg)
    }

    fn leaf(leaves: &HashMap<String, ValueId>, name: &str) -> Result<ValueId> {
        leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing tape leaf `{name}`")))
    }

    fn build_logits(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, ValueId>,
        embed: &PatchEmbedding,
        mode: ForwardMode,
    ) -> Result<ValueId> {
        Ok(self.build_graph(tape, leaves, embed, mode)?.0)
    }

    fn build_graph(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, ValueId>,
        embed: &PatchEmbedding,
        mode: ForwardMode,
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let g = self.cfg.patches;
        let group = self.cfg.group_size;
        let grouped = tape.constant(embed.grouped.clone());
        let w1 = Self::leaf(leaves, "patch_embed.mlp1.weight")?;
        let b1 = Self::leaf(leaves, "patch_embed.mlp1.bias")?;
        let w2 = Self::leaf(leaves, "patch_embed.mlp2.weight")?;
        let b2 = Self::leaf(leaves, "patch_embed.mlp2.bias")?;
        let h = ops::matmul(tape, grouped, w1)?;
        let h = ops::add_row_bias(tape, h, b1)?;
        let h = ops::gelu(tape, h)?;
        let h = ops::matmul(tape, h, w2)?;
        let h = ops::add_row_bias(tape, h, b2)?;
        let tokens = ops::segment_max_pool(tape, h, g, group)?;
        self.stack_core(tape, leaves, tokens, &embed.graph, mode)
    }

    fn stack_from_tokens(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, ValueId>,
        tokens: ValueId,
        graph: &Arc<KnnGraph>,
        mode: ForwardMode,
    ) -> Result<ValueId> {
        Ok(self.stack_core(tape, leaves, tokens, graph, mode)?.0)
    }

    fn stack_core(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, ValueId>,
        tokens: ValueId,
        graph: &Arc<KnnGraph>,
        mode: ForwardMode,
    ) -> Result<(ValueId, Vec<ValueId>)> {
        let g = self.cfg.patches;
        let t_len = g + 1;
        let cls = Self::leaf(leaves, "class_token")?;
        let mut x = ops::prepend_row(tape, cls, tokens)?;
        let mut block_outputs = Vec::with_capacity(self.cfg.depth);
        for i in 0..self.cfg.depth {
            x = self.block(tape, leaves, x, i, t_len, graph, mode)?;
            block_outputs.push(x);
        }
        let gf = Self::leaf(leaves, "norm_f.gamma")?;
        let bf = Self::leaf(leaves, "norm_f.beta")?;
        let xf = ops::layernorm(tape, x, gf, bf)?;
        let class_row = ops::gather_rows(tape, xf, vec![0])?;
        let class_vec = ops::reshape(tape, class_row, vec![self.cfg.embed_dim])?;

        let fusion = self.cfg.fusion()?;
        let patch_rows: Vec<usize> = (1..t_len).collect();
        let mut fused: Option<ValueId> = None;
        for (pos, &layer_idx) in fusion.layer_indices.iter().enumerate() {
            let feats = ops::gather_rows(tape, block_outputs[layer_idx - 1], patch_rows.clone())?;
            let maxp = ops::max_pool_rows(tape, feats)?;
            let meanp = ops::mean_pool_rows(tape, feats)?;
            let mix = ops::add(tape, maxp, meanp)?;
            let term = ops::const_scale(tape, mix, (1u64 << pos) as f64)?;
            fused = Some(match fused {
                Some(acc) => ops::add(tape, acc, term)?,
                None => term,
            });
        }
        let head_in = ops::concat_vec(tape, fused.expect("fusion config is non-empty"), class_vec)?;
        let head_in = ops::reshape(tape, head_in, vec![1, self.cfg.head_in_dim()])?;
        let hw = Self::leaf(leaves, "head.weight")?;
        let hb = Self::leaf(leaves, "head.bias")?;
        let logits = ops::matmul(tape, head_in, hw)?;
        let logits = ops::add_row_bias(tape, logits, hb)?;
        let logits = ops::reshape(tape, logits, vec![self.cfg.classes])?;
        Ok((logits, block_outputs))
    }

    fn block(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, ValueId>,
        x: ValueId,
        i: usize,
        t_len: usize,
        graph: &Arc<KnnGraph>,
        mode: ForwardMode,
    ) -> Result<ValueId> {
        let g1 = Self::leaf(leaves, &format!("blocks.{i}.ln1.gamma"))?;
        let b1 = Self::leaf(leaves, &format!("blocks.{i}.ln1.beta"))?;
        let h = ops::layernorm(tape, x, g1, b1)?;
        let attn = self.attention(tape, leaves, h, i, t_len, graph, mode)?;
        let x = ops::add(tape, x, attn)?;
        let g2 = Self::leaf(leaves, &format!("blocks.{i}.ln2.gamma"))?;
        let b2 = Self::leaf(leaves, &format!("blocks.{i}.ln2.beta"))?;
        let h2 = ops::layernorm(tape, x, g2, b2)?;
        let f = self.linear(tape, leaves, h2, &format!("blocks.{i}.ffn.fc1"), graph, mode)?;
        let f = ops::gelu(tape, f)?;
        let f = self.linear(tape, leaves, f, &format!("blocks.{i}.ffn.fc2"), graph, mode)?;
        ops::add(tape, x, f)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, ValueId>,
        x: ValueId,
        i: usize,
        t_len: usize,
        graph: &Arc<KnnGraph>,
        mode: ForwardMode,
    ) -> Result<ValueId> {
        let c = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = c / heads;
        let qkv = self.linear(tape, leaves, x, &format!("blocks.{i}.attn.qkv"), graph, mode)?;
        let q = ops::slice_cols(tape, qkv, 0, c)?;
        let k = ops::slice_cols(tape, qkv, c, c)?;
        let v = ops::slice_cols(tape, qkv, 2 * c, c)?;
        let q = ops::reshape(tape, q, vec![t_len, heads, dh])?;
        let q = ops::permute_axes3(tape, q, [1, 0, 2])?;
        let k = ops::reshape(tape, k, vec![t_len, heads, dh])?;
        let k = ops::permute_axes3(tape, k, [1, 2, 0])?;
        let v = ops::reshape(tape, v, vec![t_len, heads, dh])?;
        let v = ops::permute_axes3(tape, v, [1, 0, 2])?;
        let scores = ops::batched_matmul(tape, q, k)?;
        let scores = ops::const_scale(tape, scores, 1.0 / (dh as f64).sqrt())?;
        let attn = ops::softmax(tape, scores)?;
        let ctx = ops::batched_matmul(tape, attn, v)?;
        let ctx = ops::permute_axes3(tape, ctx, [1, 0, 2])?;
        let ctx = ops::reshape(tape, ctx, vec![t_len, c])?;
        self.linear(tape, leaves, ctx, &format!("blocks.{i}.attn.proj"), graph, mode)
    }

    /// Dense linear with optional PEFT attachments, dispatched by name.
    /// Token index 0 is the class token, which K-Rectify passes through.
    fn linear(
        &self,
        tape: &mut Tape,
        leaves: &HashMap<String, ValueId>,
        x: ValueId,
        prefix: &str,
        graph: &Arc<KnnGraph>,
        mode: ForwardMode,
    ) -> Result<ValueId> {
        let store = &self.params;
        let w0 = store.get(&format!("{prefix}.weight"))?;
        let (d_in, d_out) = (w0.shape()[0], w0.shape()[1]);
        let layout = MonarchLayout::detect(store, prefix, d_in, d_out);
        let lora_a = format!("{prefix}.lora.a");
        let has_lora = store.contains(&lora_a);
        let bias = Self::leaf(leaves, &format!("{prefix}.bias"))?;

        if mode == ForwardMode::MergedDropK {
            let mut w_eff = w0.clone();
            if let Some(layout) = &layout {
                let delta = layout.assemble(store, prefix)?;
                w_eff.axpy(1.0, &delta.monarch.materialize()?)?;
            }
            if has_lora {
                let a = store.get(&lora_a)?;
                let b = store.get(&format!("{prefix}.lora.b"))?;
                w_eff.axpy(1.0, &a.matmul(b)?)?;
            }
            let w_id = tape.constant(w_eff);
            let y = ops::matmul(tape, x, w_id)?;
            return ops::add_row_bias(tape, y, bias);
        }

        let w_id = Self::leaf(leaves, &format!("{prefix}.weight"))?;
        let y = ops::matmul(tape, x, w_id)?;
        let mut y = ops::add_row_bias(tape, y, bias)?;

        if let Some(layout) = &layout {
            let update = match mode {
                ForwardMode::Train => {
                    layout.tape_forward(tape, x, leaves, prefix, graph, 1)?
                }
                ForwardMode::MergedExact => {
                    let delta = layout.assemble(store, prefix)?;
                    let mat = tape.constant(delta.monarch.materialize()?);
                    let lam = tape.constant(Tensor::scalar(delta.lambda));
                    let kx = ops::k_rectify(tape, x, lam, Arc::clone(graph), 1)?;
                    let m = ops::matmul(tape, kx, mat)?;
                    ops::k_rectify(tape, m, lam, Arc::clone(graph), 1)?
                }
                ForwardMode::MergedDropK => unreachable!(),
            };
            y = ops::add(tape, y, update)?;
        }
        if has_lora {
            let a = Self::leaf(leaves, &lora_a)?;
            let b = Self::leaf(leaves, &format!("{prefix}.lora.b"))?;
            let xa = ops::matmul(tape, x, a)?;
            let xab = ops::matmul(tape, xa, b)?;
            y = ops::add(tape, y, xab)?;
        }
        Ok(y)
    }
}

/// The whole model's loss as a differentiable operator over its trainable
/// tensors, for central-finite-difference verification.
pub struct TrainableLossOp {
    pub model: Model,
    pub embed: PatchEmbedding,
    pub label: usize,
    pub trainable_names: Vec<String>,
}

impl TrainableLossOp {
    pub fn new(model: &Model, cloud: &PointCloud, label: usize) -> Result<Self> {
        let embed = model.build_embedding(cloud)?;
        let trainable_names = model.params.trainable_names();
        Ok(Self { model: model.clone(), embed, label, trainable_names })
    }

    fn with_inputs(&self, inputs: &[&Tensor]) -> Result<Model> {
        let mut m = self.model.clone();
        for (name, t) in self.trainable_names.iter().zip(inputs) {
            m.params.replace(name, (*t).clone())?;
        }
        Ok(m)
    }

    pub fn current_inputs(&self) -> Vec<Tensor> {
        self.trainable_names
            .iter()
            .map(|n| self.model.params.get(n).unwrap().clone())
            .collect()
    }
}

impl DifferentiableOp for TrainableLossOp {
    fn name(&self) -> &'static str {
        "model_loss"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let m = self.with_inputs(inputs)?;
        let mut tape = Tape::new();
        let leaves = m.make_leaves(&mut tape, false);
        let logits = m.build_logits(&mut tape, &leaves, &self.embed, ForwardMode::Train)?;
        let loss = ops::cross_entropy(&mut tape, logits, self.label)?;
        Ok(tape.value(loss).clone())
    }
    fn vjp(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        let m = self.with_inputs(inputs)?;
        let (_, grads) = m.loss_and_grads(&self.embed, self.label)?;
        let scale = upstream.item();
        self.trainable_names
            .iter()
            .map(|n| Ok(grads[n].scale(scale)))
            .collect()
    }
}
