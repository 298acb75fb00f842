//! Model-level contracts: injection transparency, determinism, permutation
//! invariance, gradient correctness, trainable-set hygiene, and checkpoint
//! validation.

use std::collections::HashSet;
use std::sync::Arc;

use most_core::autodiff::{finite_diff_check, ops, Tape, ValueId};
use most_core::backbone::{checkpoint, ForwardMode, Model, ModelConfig, TrainableLossOp};
use most_core::geometry::{KnnGraph, PointCloud};
use most_core::optim::{AdamW, AdamWConfig};
use most_core::params::ParamStore;
use most_core::peft::{
    inject_lora, inject_most, MonarchLayout, TargetProj, DEFAULT_TARGETS,
};
use most_core::rng::Rng;
use most_core::structured::BlockScheme;
use most_core::tensor::Tensor;
use most_core::Error;

fn cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = Rng::seed_from_u64(seed);
    PointCloud::new(Tensor::gaussian(&[n, 3], 1.0, &mut rng)).unwrap()
}

fn tiny_model(seed: u64) -> Model {
    Model::init(ModelConfig::tiny(3), seed).unwrap()
}

#[test]
fn forward_is_deterministic_and_finite() {
    let model = tiny_model(5);
    let c = cloud(20, 6);
    let a = model.forward_classify(&c, ForwardMode::Train).unwrap();
    let b = model.forward_classify(&c, ForwardMode::Train).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(a.shape(), &[3]);

    let model2 = tiny_model(5);
    let c2 = model2.forward_classify(&c, ForwardMode::Train).unwrap();
    assert_eq!(a.data(), c2.data());
}

#[test]
fn injection_preserves_outputs_before_training() {
    let c = cloud(24, 7);
    for scheme in [
        BlockScheme::Full,
        BlockScheme::LowRank { rank: None },
        BlockScheme::Kronecker,
        BlockScheme::JointLowRank { rank: None },
    ] {
        let mut model = tiny_model(8);
        let frozen = model.forward_classify(&c, ForwardMode::Train).unwrap();
        inject_most(&mut model.params, &DEFAULT_TARGETS, 2, scheme, 99).unwrap();
        let injected = model.forward_classify(&c, ForwardMode::Train).unwrap();
        assert!(
            frozen.max_abs_diff(&injected) < 1e-12,
            "zero-init identity broken for {scheme:?}"
        );
    }

    let mut model = tiny_model(8);
    let frozen = model.forward_classify(&c, ForwardMode::Train).unwrap();
    inject_lora(&mut model.params, &DEFAULT_TARGETS, 2, 99).unwrap();
    let injected = model.forward_classify(&c, ForwardMode::Train).unwrap();
    assert!(frozen.max_abs_diff(&injected) < 1e-12);
}

#[test]
fn token_permutation_leaves_logits_unchanged() {
    let model = tiny_model(11);
    let g = model.cfg.patches;
    let c = model.cfg.embed_dim;
    let mut rng = Rng::seed_from_u64(12);
    let centers = Tensor::gaussian(&[g, 3], 1.0, &mut rng);
    let graph = Arc::new(KnnGraph::build(&centers, model.cfg.knn_k).unwrap());
    let tokens = Tensor::gaussian(&[g, c], 1.0, &mut rng);

    let logits = model
        .forward_from_tokens(&tokens, Arc::clone(&graph), ForwardMode::Train)
        .unwrap();

    let perm: Vec<usize> = vec![4, 1, 5, 0, 3, 2];
    let mut tokens_perm = Tensor::zeros(&[g, c]);
    for (new, &old) in perm.iter().enumerate() {
        for j in 0..c {
            tokens_perm.set(&[new, j], tokens.at(&[old, j]));
        }
    }
    let graph_perm = Arc::new(graph.permuted(&perm).unwrap());
    let logits_perm = model
        .forward_from_tokens(&tokens_perm, graph_perm, ForwardMode::Train)
        .unwrap();
    assert!(
        logits.max_abs_diff(&logits_perm) < 1e-9,
        "diff {}",
        logits.max_abs_diff(&logits_perm)
    );
}

#[test]
fn injected_model_passes_full_gradient_check() {
    let mut model = tiny_model(13);
    inject_most(&mut model.params, &DEFAULT_TARGETS, 2, BlockScheme::Full, 14).unwrap();
    // Perturb the zero blocks so gradients flow through every path.
    let mut rng = Rng::seed_from_u64(15);
    for e in model.params.entries_mut() {
        if e.trainable && e.tensor.max_abs() == 0.0 && e.name.contains(".delta.l.") {
            e.tensor = Tensor::gaussian(e.tensor.shape(), 0.1, &mut rng);
        }
    }
    for e in model.params.entries_mut() {
        if e.name.ends_with(".delta.lambda") {
            e.tensor = Tensor::scalar(0.3);
        }
    }
    let c = cloud(16, 16);
    let op = TrainableLossOp::new(&model, &c, 1).unwrap();
    // Subset of representative tensors; the acceptance suite sweeps all.
    let mut subset = op;
    subset.trainable_names = vec![
        "blocks.0.attn.qkv.delta.lambda".into(),
        "blocks.0.attn.qkv.delta.l.0.w".into(),
        "blocks.1.ffn.fc2.delta.r.1.w".into(),
        "head.weight".into(),
    ];
    let inputs = subset.current_inputs();
    let report = finite_diff_check(&subset, &inputs, 1e-5, 1e-4).unwrap();
    assert!(report.pass, "max_rel_err = {:.3e}", report.max_rel_err);
}

#[test]
fn gradients_never_reach_frozen_base_weights() {
    let mut model = tiny_model(17);
    inject_most(&mut model.params, &DEFAULT_TARGETS, 2, BlockScheme::Full, 18).unwrap();
    let c = cloud(16, 19);
    let embed = model.build_embedding(&c).unwrap();
    let (_, grads) = model.loss_and_grads(&embed, 0).unwrap();
    assert!(!grads.contains_key("blocks.0.attn.qkv.weight"));
    assert!(!grads.contains_key("patch_embed.mlp1.weight"));
    assert!(grads.contains_key("blocks.0.attn.qkv.delta.lambda"));
    assert!(grads.contains_key("head.weight"));
}

#[test]
fn trainable_set_audit_after_injection() {
    let mut model = tiny_model(21);
    let report = inject_most(
        &mut model.params,
        &DEFAULT_TARGETS,
        2,
        BlockScheme::Full,
        22,
    )
    .unwrap();

    let mut expected: HashSet<String> = HashSet::new();
    for i in 0..model.cfg.depth {
        for t in DEFAULT_TARGETS {
            let prefix = format!("blocks.{i}.{}", t.suffix());
            let w = model.params.get(&format!("{prefix}.weight")).unwrap();
            let layout = MonarchLayout::new(w.shape()[0], w.shape()[1], 2, BlockScheme::Full).unwrap();
            expected.extend(layout.param_names(&prefix));
        }
    }
    expected.insert("head.weight".into());
    expected.insert("head.bias".into());

    let actual: HashSet<String> = model.params.trainable_names().into_iter().collect();
    assert_eq!(actual, expected);
    assert_eq!(report.trainable_scalars, model.params.trainable_scalar_count());

    // Scalar count decomposes into deltas plus head.
    let mut delta_total = 0;
    for i in 0..model.cfg.depth {
        for t in DEFAULT_TARGETS {
            let prefix = format!("blocks.{i}.{}", t.suffix());
            let w = model.params.get(&format!("{prefix}.weight")).unwrap();
            let layout = MonarchLayout::new(w.shape()[0], w.shape()[1], 2, BlockScheme::Full).unwrap();
            delta_total += layout.delta_param_count();
        }
    }
    let head: usize = model.cfg.head_in_dim() * model.cfg.classes + model.cfg.classes;
    assert_eq!(report.trainable_scalars, delta_total + head);
}

#[test]
fn unknown_target_is_config_error() {
    let mut store = ParamStore::new();
    store.insert("blocks.0.attn.qkv.weight", Tensor::zeros(&[4, 12]), true).unwrap();
    // fc1 weight missing → the fc1 target cannot resolve.
    let err = inject_most(&mut store, &[TargetProj::Fc1], 2, BlockScheme::Full, 1);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn checkpoint_roundtrip_preserves_model_behaviour() {
    let dir = std::env::temp_dir().join("most_model_ckpt_test");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("tiny.mstc");

    let mut model = tiny_model(23);
    inject_most(&mut model.params, &DEFAULT_TARGETS, 2, BlockScheme::Full, 24).unwrap();
    checkpoint::save(&model.params, &path).unwrap();

    let loaded = Model::from_parts(model.cfg.clone(), checkpoint::load(&path).unwrap()).unwrap();
    let c = cloud(18, 25);
    let a = model.forward_classify(&c, ForwardMode::Train).unwrap();
    let b = loaded.forward_classify(&c, ForwardMode::Train).unwrap();
    assert_eq!(a.data(), b.data());

    // A different architecture must be rejected with a shape complaint.
    let mut other = ModelConfig::tiny(3);
    other.embed_dim = 32;
    match Model::from_parts(other, checkpoint::load(&path).unwrap()) {
        Err(Error::Format(msg)) => assert!(msg.contains("shape"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }

    // Unknown tensor names are rejected by name.
    let mut store = checkpoint::load(&path).unwrap();
    store.insert("rogue.tensor", Tensor::zeros(&[1]), false).unwrap();
    match Model::from_parts(model.cfg.clone(), store) {
        Err(Error::Format(msg)) => assert!(msg.contains("rogue.tensor")),
        other => panic!("expected format error, got {other:?}"),
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sparse_two_layer_network_fits_monarch_teacher() {
    // Teacher: a linear map representable by a composition of two Monarch
    // operators; student: two sparse Point Monarch layers trained from
    // scratch with AdamW on MSE.
    let d = 8;
    let b = 2;
    let g = 6;
    let mut rng = Rng::seed_from_u64(31);
    let centers = Tensor::gaussian(&[g, 3], 1.0, &mut rng);
    let graph = Arc::new(KnnGraph::build(&centers, 2).unwrap());

    use most_core::structured::MonarchMatrix;
    let t1 = MonarchMatrix::random(d, d, b, BlockScheme::Full, 0.5, &mut rng).unwrap();
    let t2 = MonarchMatrix::random(d, d, b, BlockScheme::Full, 0.5, &mut rng).unwrap();
    let teacher = t1.materialize().unwrap().matmul(&t2.materialize().unwrap()).unwrap();

    let inputs: Vec<Tensor> = (0..16).map(|_| Tensor::gaussian(&[g, d], 1.0, &mut rng)).collect();
    let targets: Vec<Tensor> = inputs.iter().map(|x| x.matmul(&teacher).unwrap()).collect();

    // Student parameters: both layers randomly initialized (sparse training
    // has no frozen base to stay faithful to).
    let mut store = ParamStore::new();
    let layout = MonarchLayout::new(d, d, b, BlockScheme::Full).unwrap();
    layout.init_params(&mut store, "l1", &mut rng).unwrap();
    layout.init_params(&mut store, "l2", &mut rng).unwrap();
    for e in store.entries_mut() {
        if e.name.contains(".delta.l.") {
            e.tensor = Tensor::gaussian(e.tensor.shape(), 0.35, &mut rng);
        }
    }

    let mut opt = AdamW::new(AdamWConfig { lr: 0.02, weight_decay: 0.0, ..Default::default() });
    let mut last_mse = f64::INFINITY;
    for _step in 0..1200 {
        let mut grad_sum: Vec<(String, Tensor)> = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), Tensor::zeros(e.tensor.shape())))
            .collect();
        let mut total = 0.0;
        for (x, y) in inputs.iter().zip(&targets) {
            let mut tape = Tape::new();
            let mut leaves = std::collections::HashMap::new();
            let mut leaf_ids: Vec<(String, ValueId)> = Vec::new();
            for e in store.entries() {
                let id = tape.param(e.tensor.clone());
                leaves.insert(e.name.clone(), id);
                leaf_ids.push((e.name.clone(), id));
            }
            let x_id = tape.constant(x.clone());
            let h = layout
                .tape_forward(&mut tape, x_id, &leaves, "l1", &graph, 0)
                .unwrap();
            let h = layout
                .tape_forward(&mut tape, h, &leaves, "l2", &graph, 0)
                .unwrap();
            let loss = ops::mse_loss(&mut tape, h, y.clone()).unwrap();
            total += tape.value(loss).item();
            let mut grads = tape.backward(loss).unwrap();
            for ((_, id), (_, acc)) in leaf_ids.iter().zip(grad_sum.iter_mut()) {
                if let Some(gt) = grads.take(*id) {
                    acc.axpy(1.0 / inputs.len() as f64, &gt).unwrap();
                }
            }
        }
        last_mse = total / inputs.len() as f64;
        if last_mse < 5e-4 {
            break;
        }
        let mut triples: Vec<(&str, &mut Tensor, &Tensor)> = Vec::new();
        let mut grad_iter = grad_sum.iter();
        for e in store.entries_mut() {
            let (gname, gt) = grad_iter.next().unwrap();
            debug_assert_eq!(&e.name, gname);
            triples.push((e.name.as_str(), &mut e.tensor, gt));
        }
        opt.step(0.02, &mut triples).unwrap();
    }
    assert!(last_mse < 1e-3, "sparse student stalled at MSE {last_mse:.3e}");
}
