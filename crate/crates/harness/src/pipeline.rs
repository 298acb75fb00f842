//! Training and evaluation pipelines.
//!
//! Batches evaluate per-sample tapes in parallel; gradients are reduced in
//! sample order so a fixed seed reproduces the exact loss trajectory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use most_core::backbone::{checkpoint, ForwardMode, Model, PatchEmbedding};
use most_core::error::{Error, Result};
use most_core::geometry::local_feature_distance;
use most_core::optim::{cosine_lr, AdamW, AdamWConfig};
use most_core::params::ParamStore;
use most_core::peft::{
    apply_bitfit, apply_full, apply_linear_probe, inject_lora, inject_most, merge_deviation,
    MonarchLayout, MostLinear, PointMonarchDelta, TargetProj, DEFAULT_TARGETS,
};
use most_core::rng::Rng;
use most_core::structured::BlockScheme;
use most_core::tensor::Tensor;
use rayon::prelude::*;

use crate::audit::{
    audit_bitfit_toy, audit_full_toy, audit_lora, audit_most, audit_probe_toy, matched_lora_rank,
    ModelShape,
};
use crate::config::RunConfig;
use crate::dataset::{self, Dataset};
use crate::report::{MergeReport, RunReport};

/// Fine-tuning method selector.
#[derive(Debug, Clone)]
pub enum Method {
    Full,
    LinearProbe,
    BitFit,
    Lora { rank: Option<usize>, match_most_b: Option<usize> },
    Most { b: usize, scheme: BlockScheme, targets: Vec<TargetProj> },
}

impl Method {
    pub fn most_default(b: usize, scheme: BlockScheme) -> Self {
        Method::Most { b, scheme, targets: DEFAULT_TARGETS.to_vec() }
    }
}

pub fn load_split(data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = dataset::load(&data_dir.join("train.mspc"))?;
    let test = dataset::load(&data_dir.join("test.mspc"))?;
    if train.classes != test.classes {
        return Err(Error::config("train/test class counts disagree"));
    }
    Ok((train, test))
}

pub fn precompute_embeddings(model: &Model, ds: &Dataset) -> Result<Vec<PatchEmbedding>> {
    ds.samples
        .par_iter()
        .map(|s| model.build_embedding(&s.cloud))
        .collect()
}

/// Accuracy over a dataset; argmax ties resolve to the lowest index.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    embeds: &[PatchEmbedding],
    mode: ForwardMode,
) -> Result<f64> {
    let correct: usize = ds
        .samples
        .par_iter()
        .zip(embeds)
        .map(|(s, e)| {
            let logits = model.logits_from_embedding(e, mode)?;
            let mut best = 0;
            for j in 1..logits.numel() {
                if logits.data()[j] > logits.data()[best] {
                    best = j;
                }
            }
            Ok(usize::from(best == s.label as usize))
        })
        .collect::<Result<Vec<usize>>>()?
        .iter()
        .sum();
    Ok(correct as f64 / ds.samples.len() as f64)
}

/// Mean local feature distance at the final block over a dataset.
pub fn mean_feature_distance(
    model: &Model,
    ds: &Dataset,
    embeds: &[PatchEmbedding],
    mode: ForwardMode,
) -> Result<f64> {
    let dists: Vec<f64> = ds
        .samples
        .par_iter()
        .zip(embeds)
        .map(|(_, e)| {
            let (feats, graph) = model.final_block_features(e, mode)?;
            local_feature_distance(&graph, &feats)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// AdamW training with cosine decay; returns the per-epoch mean loss.
pub fn train(
    model: &mut Model,
    ds: &Dataset,
    embeds: &[PatchEmbedding],
    cfg: &RunConfig,
) -> Result<Vec<f64>> {
    let ts = &cfg.train;
    let n = ds.samples.len();
    if n == 0 {
        return Err(Error::config("empty training set"));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: ts.lr,
        weight_decay: ts.weight_decay,
        ..Default::default()
    });
    let batch = ts.batch_size.max(1);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = ts.epochs * steps_per_epoch;
    let trainable = model.params.trainable_names();
    let mut shuffle_rng = Rng::seed_from_u64(cfg.seed ^ 0x0dae_5eed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut per_epoch = Vec::with_capacity(ts.epochs);
    let mut step = 0usize;

    for _epoch in 0..ts.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<(f64, HashMap<String, Tensor>)> = chunk
                .par_iter()
                .map(|&i| model.loss_and_grads(&embeds[i], ds.samples[i].label as usize))
                .collect::<Result<_>>()?;
            let scale = 1.0 / chunk.len() as f64;
            let mut summed: HashMap<String, Tensor> = HashMap::with_capacity(trainable.len());
            for (loss, grads) in &results {
                epoch_loss += loss;
                for name in &trainable {
                    let g = &grads[name];
                    match summed.get_mut(name) {
                        Some(acc) => acc.axpy(scale, g)?,
                        None => {
                            summed.insert(name.clone(), g.scale(scale));
                        }
                    }
                }
            }
            let lr = cosine_lr(ts.lr, step, total_steps);
            step += 1;
            let mut triples: Vec<(&str, &mut Tensor, &Tensor)> = Vec::new();
            for e in model.params.entries_mut() {
                if e.trainable {
                    let g = summed
                        .get(e.name.as_str())
                        .ok_or_else(|| Error::config(format!("missing gradient for `{}`", e.name)))?;
                    triples.push((e.name.as_str(), &mut e.tensor, g));
                }
            }
            opt.step(lr, &mut triples)?;
        }
        per_epoch.push(epoch_loss / n as f64);
    }
    Ok(per_epoch)
}

pub struct PipelineOutcome {
    pub report: RunReport,
    pub checkpoint: PathBuf,
    pub report_path: PathBuf,
}

fn write_outcome(
    out_dir: &Path,
    model: &Model,
    report: RunReport,
) -> Result<PipelineOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join("model.mstc");
    checkpoint::save(&model.params, &checkpoint_path)?;
    let report_path = out_dir.join("report.json");
    report.save(&report_path)?;
    Ok(PipelineOutcome { report, checkpoint: checkpoint_path, report_path })
}

/// Train the dense backbone from scratch on the source task.
pub fn run_pretrain(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<PipelineOutcome> {
    let started = Instant::now();
    let (train_ds, test_ds) = load_split(data_dir)?;
    let model_cfg = cfg.model.to_model_config(train_ds.classes as usize);
    let mut model = Model::init(model_cfg, cfg.seed)?;
    apply_full(&mut model.params);

    let expected = audit_full_toy(&model.cfg).total;
    let actual = model.params.trainable_scalar_count();
    if expected != actual {
        return Err(Error::config(format!(
            "trainable count {actual} disagrees with audit {expected}"
        )));
    }

    let train_embeds = precompute_embeddings(&model, &train_ds)?;
    let test_embeds = precompute_embeddings(&model, &test_ds)?;
    let per_epoch_loss = train(&mut model, &train_ds, &train_embeds, cfg)?;
    let final_train_accuracy = evaluate(&model, &train_ds, &train_embeds, ForwardMode::Train)?;
    let final_test_accuracy = evaluate(&model, &test_ds, &test_embeds, ForwardMode::Train)?;
    let lfd = mean_feature_distance(&model, &test_ds, &test_embeds, ForwardMode::Train)?;

    let report = RunReport {
        method: "pretrain".into(),
        seed: cfg.seed,
        trainable_params: actual,
        total_params: model.params.total_scalar_count(),
        per_epoch_loss,
        final_train_accuracy,
        final_test_accuracy,
        local_feature_distance: Some(lfd),
        merge: None,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        config: cfg.echo(),
    };
    write_outcome(out_dir, &model, report)
}

/// Infer the class count a checkpoint was trained with from its head shape.
fn stored_classes(store: &ParamStore) -> Result<usize> {
    Ok(store.get("head.weight")?.shape()[1])
}

/// Load a checkpoint into a model, rebuild the head for the target task,
/// and apply the fine-tuning method.
pub fn prepare_finetune_model(
    cfg: &RunConfig,
    method: &Method,
    checkpoint_path: &Path,
    classes: usize,
) -> Result<(Model, String, usize)> {
    let store = checkpoint::load(checkpoint_path)?;
    let pre_classes = stored_classes(&store)?;
    let model_cfg = cfg.model.to_model_config(pre_classes);
    let mut model = Model::from_parts(model_cfg, store)?;
    model.replace_head(classes, cfg.seed ^ 0x4ead)?;

    let shape = ModelShape::Toy(model.cfg.clone());
    let (label, expected) = match method {
        Method::Full => {
            apply_full(&mut model.params);
            ("full".to_string(), audit_full_toy(&model.cfg).total)
        }
        Method::LinearProbe => {
            apply_linear_probe(&mut model.params);
            ("linear-probe".to_string(), audit_probe_toy(&model.cfg).total)
        }
        Method::BitFit => {
            apply_bitfit(&mut model.params);
            ("bitfit".to_string(), audit_bitfit_toy(&model.cfg).total)
        }
        Method::Lora { rank, match_most_b } => {
            let rank = match (rank, match_most_b) {
                (Some(r), _) => *r,
                (None, Some(b)) => matched_lora_rank(
                    &shape,
                    *b,
                    BlockScheme::Full,
                    &DEFAULT_TARGETS,
                    classes,
                )?,
                (None, None) => {
                    return Err(Error::Usage(
                        "lora needs --rank or --match-most-b".into(),
                    ))
                }
            };
            inject_lora(&mut model.params, &DEFAULT_TARGETS, rank, cfg.seed ^ 0x10a)?;
            (
                format!("lora(r={rank})"),
                audit_lora(&shape, rank, &DEFAULT_TARGETS, classes)?.total,
            )
        }
        Method::Most { b, scheme, targets } => {
            inject_most(&mut model.params, targets, *b, *scheme, cfg.seed ^ 0x305)?;
            (
                format!("most(b={b},{})", scheme.name()),
                audit_most(&shape, *b, *scheme, targets, classes)?.total,
            )
        }
    };
    let actual = model.params.trainable_scalar_count();
    if expected != actual {
        return Err(Error::config(format!(
            "trainable count {actual} disagrees with audit {expected} for {label}"
        )));
    }
    Ok((model, label, actual))
}

/// Per-layer `‖exact − dropK‖/‖exact‖` on Gaussian probes over a real graph.
pub fn layer_deviation_table(
    model: &Model,
    embed: &PatchEmbedding,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    let mut rng = Rng::seed_from_u64(seed);
    for prefix in Model::linear_prefixes(&model.cfg) {
        let w = model.params.get(&format!("{prefix}.weight"))?;
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let Some(layout) = MonarchLayout::detect(&model.params, &prefix, d_in, d_out) else {
            continue;
        };
        let delta: PointMonarchDelta = layout.assemble(&model.params, &prefix)?;
        let bias = model.params.get(&format!("{prefix}.bias"))?.clone();
        let layer = MostLinear::new(w.clone(), Some(bias), delta)?;
        let g = embed.graph.len();
        let xs: Vec<Tensor> = (0..4).map(|_| Tensor::gaussian(&[g, d_in], 1.0, &mut rng)).collect();
        out.push((prefix, merge_deviation(&layer, &embed.graph, &xs)?));
    }
    Ok(out)
}

/// Fine-tune with the chosen method and report; for MoST runs the merge
/// fidelity checks as well.
pub fn run_finetune(
    cfg: &RunConfig,
    method: &Method,
    checkpoint_path: &Path,
    data_dir: &Path,
    out_dir: &Path,
) -> Result<PipelineOutcome> {
    let started = Instant::now();
    let (train_ds, test_ds) = load_split(data_dir)?;
    let (mut model, label, trainable) =
        prepare_finetune_model(cfg, method, checkpoint_path, train_ds.classes as usize)?;

    let train_embeds = precompute_embeddings(&model, &train_ds)?;
    let test_embeds = precompute_embeddings(&model, &test_ds)?;
    let per_epoch_loss = train(&mut model, &train_ds, &train_embeds, cfg)?;
    let final_train_accuracy = evaluate(&model, &train_ds, &train_embeds, ForwardMode::Train)?;
    let final_test_accuracy = evaluate(&model, &test_ds, &test_embeds, ForwardMode::Train)?;
    let lfd = mean_feature_distance(&model, &test_ds, &test_embeds, ForwardMode::Train)?;

    let merge = if matches!(method, Method::Most { .. }) {
        let exact_accuracy = evaluate(&model, &test_ds, &test_embeds, ForwardMode::MergedExact)?;
        let dropk_accuracy = evaluate(&model, &test_ds, &test_embeds, ForwardMode::MergedDropK)?;
        let per_layer = layer_deviation_table(&model, &test_embeds[0], cfg.seed ^ 0xdea1)?;
        let mean = if per_layer.is_empty() {
            0.0
        } else {
            per_layer.iter().map(|(_, d)| d).sum::<f64>() / per_layer.len() as f64
        };
        Some(MergeReport {
            exact_accuracy,
            dropk_accuracy,
            mean_layer_deviation: mean,
            per_layer_deviation: per_layer,
        })
    } else {
        None
    };

    let report = RunReport {
        method: label,
        seed: cfg.seed,
        trainable_params: trainable,
        total_params: model.params.total_scalar_count(),
        per_epoch_loss,
        final_train_accuracy,
        final_test_accuracy,
        local_feature_distance: Some(lfd),
        merge,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        config: cfg.echo(),
    };
    write_outcome(out_dir, &model, report)
}

/// Load a checkpoint for evaluation; the head shape tells us the task size.
pub fn load_model_for_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<Model> {
    let store = checkpoint::load(checkpoint_path)?;
    let classes = stored_classes(&store)?;
    Model::from_parts(cfg.model.to_model_config(classes), store)
}

/// Fold every delta and LoRA factor into the base weights (dropK) and strip
/// the adapter tensors, leaving a plain dense checkpoint.
pub fn fold_dropk(model: &Model) -> Result<Model> {
    let mut folded = model.clone();
    for prefix in Model::linear_prefixes(&model.cfg) {
        let wname = format!("{prefix}.weight");
        let w = model.params.get(&wname)?;
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let mut w_new = w.clone();
        let mut changed = false;
        if let Some(layout) = MonarchLayout::detect(&model.params, &prefix, d_in, d_out) {
            let delta = layout.assemble(&model.params, &prefix)?;
            w_new.axpy(1.0, &delta.monarch.materialize()?)?;
            changed = true;
        }
        let a_name = format!("{prefix}.lora.a");
        if model.params.contains(&a_name) {
            let a = model.params.get(&a_name)?;
            let b = model.params.get(&format!("{prefix}.lora.b"))?;
            w_new.axpy(1.0, &a.matmul(b)?)?;
            changed = true;
        }
        if changed {
            folded.params.replace(&wname, w_new)?;
        }
    }
    folded
        .params
        .remove_where(|name| name.contains(".delta.") || name.contains(".lora."));
    Ok(folded)
}

pub fn parse_forward_mode(s: &str) -> Result<ForwardMode> {
    match s {
        "train" => Ok(ForwardMode::Train),
        "exact" => Ok(ForwardMode::MergedExact),
        "dropk" => Ok(ForwardMode::MergedDropK),
        other => Err(Error::Usage(format!("unknown eval mode `{other}`"))),
    }
}
