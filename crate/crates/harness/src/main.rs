//! `most` — the experiment CLI.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use most_core::backbone::checkpoint;
use most_core::error::{Error, Result};
use most_core::peft::{TargetProj, DEFAULT_TARGETS};
use most_core::structured::BlockScheme;

use most_harness::audit::{
    audit_bitfit_toy, audit_full_toy, audit_lora, audit_most, audit_probe_toy, matched_lora_rank,
    ModelShape,
};
use most_harness::bench::{run_bench, Precision};
use most_harness::config::RunConfig;
use most_harness::dataset::{self, GenConfig};
use most_harness::diagnose::{run_diagnose, to_csv};
use most_harness::pipeline::{
    self, evaluate, fold_dropk, load_model_for_eval, load_split, parse_forward_mode,
    precompute_embeddings, Method,
};
use most_harness::report::MergeReport;

#[derive(Parser)]
#[command(name = "most", version, about = "Structured-matrix PEFT for point-cloud models")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Arithmetic precision; f32 applies to the bench command, everything
    /// else runs in f64.
    #[arg(long, global = true, default_value = "f64")]
    precision: String,

    /// JSON run configuration, echoed into reports.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (or file, for diagnose/bench).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape-classification dataset (train + test).
    GenData {
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        train_per_class: usize,
        #[arg(long, default_value_t = 10)]
        test_per_class: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Fraction of points replaced by uniform background outliers.
        #[arg(long, default_value_t = 0.0)]
        outliers: f64,
        /// Per-axis anisotropic deformation amplitude.
        #[arg(long, default_value_t = 0.0)]
        stretch: f64,
        /// Keep every sample in its canonical orientation.
        #[arg(long)]
        canonical_poses: bool,
    },
    /// Train the dense backbone from scratch on a source task.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint on a target task.
    Finetune {
        /// full | linear-probe | bitfit | lora | most
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 8)]
        b: usize,
        /// full | lowrank | kronecker | joint
        #[arg(long, default_value = "full")]
        variant: String,
        /// Comma-separated projection targets (qkv, proj, fc1, fc2).
        #[arg(long)]
        targets: Option<String>,
        /// LoRA rank.
        #[arg(long)]
        rank: Option<usize>,
        /// Pick the LoRA rank whose budget matches most(b).
        #[arg(long)]
        match_most_b: Option<usize>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Override config epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint: accuracy on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train | exact | dropk
        #[arg(long, default_value = "train")]
        mode: String,
    },
    /// Local-feature-distance vs accuracy table across checkpoints (CSV).
    Diagnose {
        /// Two or more checkpoint paths.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// FLOP model and measured wall time for dense vs Monarch vs Point
    /// Monarch application.
    Bench {
        #[arg(long, default_value_t = 384)]
        d: usize,
        /// Comma-separated block counts.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 16])]
        b: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        g: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Closed-form trainable-parameter audit.
    AuditParams {
        /// toy | pointmae-like
        #[arg(long, default_value = "pointmae-like")]
        model_shape: String,
        /// most | lora | full | bitfit | linear-probe
        #[arg(long, default_value = "most")]
        method: String,
        #[arg(long, default_value_t = 32)]
        b: usize,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        targets: Option<String>,
        #[arg(long, default_value_t = 15)]
        classes: usize,
    },
    /// Fold a fine-tuned checkpoint for inference.
    Merge {
        #[arg(long)]
        checkpoint: PathBuf,
        /// dropk | exact
        #[arg(long, default_value = "dropk")]
        mode: String,
        /// Dataset used to measure the λ-induced output deviation.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<BlockScheme> {
    match s {
        "full" => Ok(BlockScheme::Full),
        "lowrank" => Ok(BlockScheme::LowRank { rank: None }),
        "kronecker" => Ok(BlockScheme::Kronecker),
        "joint" => Ok(BlockScheme::JointLowRank { rank: None }),
        other => Err(Error::Usage(format!("unknown variant `{other}`"))),
    }
}

fn parse_targets(s: &Option<String>) -> Result<Vec<TargetProj>> {
    match s {
        None => Ok(DEFAULT_TARGETS.to_vec()),
        Some(list) => list.split(',').map(|t| TargetProj::parse(t.trim())).collect(),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn require_f64(precision: &str, what: &str) -> Result<()> {
    match precision {
        "f64" => Ok(()),
        "f32" => Err(Error::Usage(format!(
            "--precision f32 applies to the bench command; {what} runs in f64"
        ))),
        other => Err(Error::Usage(format!("unknown precision `{other}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { classes, train_per_class, test_per_class, points, noise, outliers, stretch, canonical_poses } => {
            require_f64(&cli.precision, "data generation")?;
            let cfg = load_config(&cli)?;
            let gen = GenConfig {
                classes: *classes,
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
                points: *points,
                noise: *noise,
                outliers: *outliers,
                stretch: *stretch,
                random_pose: !canonical_poses,
                seed: cfg.seed,
            };
            let dir = out_dir(&cli, "data");
            std::fs::create_dir_all(&dir)?;
            let (train, test) = dataset::generate(&gen)?;
            dataset::save(&train, &dir.join("train.mspc"))?;
            dataset::save(&test, &dir.join("test.mspc"))?;
            let sidecar = serde_json::json!({
                "generator": gen,
                "train_samples": train.samples.len(),
                "test_samples": test.samples.len(),
            });
            std::fs::write(dir.join("gen.json"), serde_json::to_string_pretty(&sidecar).unwrap() + "\n")?;
            println!(
                "wrote {} train / {} test samples to {}",
                train.samples.len(),
                test.samples.len(),
                dir.display()
            );
            Ok(())
        }
        Cmd::Pretrain { data } => {
            require_f64(&cli.precision, "pretraining")?;
            let cfg = load_config(&cli)?;
            let dir = out_dir(&cli, "runs/pretrain");
            let outcome = pipeline::run_pretrain(&cfg, data, &dir)?;
            println!(
                "pretrain done: train acc {:.4}, test acc {:.4}, {} trainable params → {}",
                outcome.report.final_train_accuracy,
                outcome.report.final_test_accuracy,
                outcome.report.trainable_params,
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Cmd::Finetune {
            method,
            b,
            variant,
            targets,
            rank,
            match_most_b,
            checkpoint,
            data,
            epochs,
        } => {
            require_f64(&cli.precision, "fine-tuning")?;
            let mut cfg = load_config(&cli)?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let method = match method.as_str() {
                "full" => Method::Full,
                "linear-probe" => Method::LinearProbe,
                "bitfit" => Method::BitFit,
                "lora" => Method::Lora { rank: *rank, match_most_b: *match_most_b },
                "most" => Method::Most {
                    b: *b,
                    scheme: parse_variant(variant)?,
                    targets: parse_targets(targets)?,
                },
                other => return Err(Error::Usage(format!("unknown method `{other}`"))),
            };
            let dir = out_dir(&cli, "runs/finetune");
            let outcome = pipeline::run_finetune(&cfg, &method, checkpoint, data, &dir)?;
            println!(
                "{}: test acc {:.4} ({} trainable params) → {}",
                outcome.report.method,
                outcome.report.final_test_accuracy,
                outcome.report.trainable_params,
                outcome.report_path.display()
            );
            Ok(())
        }
        Cmd::Eval { checkpoint, data, mode } => {
            require_f64(&cli.precision, "evaluation")?;
            let cfg = load_config(&cli)?;
            let model = load_model_for_eval(&cfg, checkpoint)?;
            let (_, test) = load_split(data)?;
            let embeds = precompute_embeddings(&model, &test)?;
            let acc = evaluate(&model, &test, &embeds, parse_forward_mode(mode)?)?;
            println!("accuracy ({mode}): {acc:.4}");
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                let payload = serde_json::json!({ "mode": mode, "accuracy": acc });
                std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&payload).unwrap() + "\n")?;
            }
            Ok(())
        }
        Cmd::Diagnose { checkpoints, data } => {
            require_f64(&cli.precision, "diagnostics")?;
            let cfg = load_config(&cli)?;
            let rows = run_diagnose(&cfg, checkpoints, data)?;
            let csv = to_csv(&rows);
            print!("{csv}");
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from("diagnose.csv"));
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            std::fs::write(&path, csv)?;
            Ok(())
        }
        Cmd::Bench { d, b, g, k, repeats } => {
            let cfg = load_config(&cli)?;
            let precision = Precision::parse(&cli.precision)?;
            let rows = run_bench(*d, b, *g, *k, *repeats, precision, cfg.seed)?;
            println!("d={d} g={g} k={k} precision={}", cli.precision);
            println!(
                "{:>4} {:>14} {:>14} {:>16} {:>10} {:>10} {:>10}",
                "b", "dense_flops", "monarch_flops", "pt_monarch_flops", "dense_ms", "monarch_ms", "pt_ms"
            );
            for r in &rows {
                println!(
                    "{:>4} {:>14} {:>14} {:>16} {:>10.3} {:>10.3} {:>10.3}",
                    r.b,
                    r.dense_flops,
                    r.monarch_flops,
                    r.point_monarch_flops,
                    r.dense_ms,
                    r.monarch_ms,
                    r.point_monarch_ms
                );
            }
            if let Some(out) = &cli.out {
                if let Some(parent) = out.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                std::fs::write(out, serde_json::to_string_pretty(&rows).unwrap() + "\n")?;
            }
            Ok(())
        }
        Cmd::AuditParams { model_shape, method, b, variant, rank, targets, classes } => {
            let cfg = load_config(&cli)?;
            let shape = ModelShape::parse(model_shape, &cfg.model.to_model_config(*classes))?;
            let targets = parse_targets(targets)?;
            let breakdown = match method.as_str() {
                "most" => audit_most(&shape, *b, parse_variant(variant)?, &targets, *classes)?,
                "lora" => {
                    let r = match rank {
                        Some(r) => *r,
                        None => matched_lora_rank(&shape, *b, parse_variant(variant)?, &targets, *classes)?,
                    };
                    audit_lora(&shape, r, &targets, *classes)?
                }
                "full" => match &shape {
                    ModelShape::Toy(c) => audit_full_toy(c),
                    ModelShape::PointMaeLike => {
                        return Err(Error::Usage(
                            "full-model audit is defined for the toy shape only".into(),
                        ))
                    }
                },
                "bitfit" => match &shape {
                    ModelShape::Toy(c) => audit_bitfit_toy(c),
                    ModelShape::PointMaeLike => {
                        return Err(Error::Usage(
                            "bitfit audit is defined for the toy shape only".into(),
                        ))
                    }
                },
                "linear-probe" => match &shape {
                    ModelShape::Toy(c) => audit_probe_toy(c),
                    ModelShape::PointMaeLike => {
                        return Err(Error::Usage(
                            "linear-probe audit is defined for the toy shape only".into(),
                        ))
                    }
                },
                other => return Err(Error::Usage(format!("unknown method `{other}`"))),
            };
            println!(
                "{}: backbone_delta={} lambdas={} head={} total={}",
                breakdown.method, breakdown.backbone_delta, breakdown.lambdas, breakdown.head, breakdown.total
            );
            if let Some(out) = &cli.out {
                if let Some(parent) = out.parent() {
                    if !parent.as_os_str().is_empty() {
                        std::fs::create_dir_all(parent)?;
                    }
                }
                std::fs::write(out, serde_json::to_string_pretty(&breakdown).unwrap() + "\n")?;
            }
            Ok(())
        }
        Cmd::Merge { checkpoint: ckpt_path, mode, data } => {
            require_f64(&cli.precision, "merging")?;
            let cfg = load_config(&cli)?;
            let model = load_model_for_eval(&cfg, ckpt_path)?;
            let dir = out_dir(&cli, "runs/merge");
            std::fs::create_dir_all(&dir)?;
            let merged_path = dir.join("merged.mstc");
            match mode.as_str() {
                "dropk" => {
                    let folded = fold_dropk(&model)?;
                    checkpoint::save(&folded.params, &merged_path)?;
                }
                "exact" => {
                    // Exact inference keeps the delta tensors; the merged
                    // artifact is the checkpoint as-is.
                    checkpoint::save(&model.params, &merged_path)?;
                }
                other => return Err(Error::Usage(format!("unknown merge mode `{other}`"))),
            }
            let mut report = serde_json::json!({ "mode": mode, "merged": merged_path.display().to_string() });
            if let Some(data_dir) = data {
                let (_, test) = load_split(data_dir)?;
                let embeds = precompute_embeddings(&model, &test)?;
                let exact = evaluate(&model, &test, &embeds, parse_forward_mode("exact")?)?;
                let dropk = evaluate(&model, &test, &embeds, parse_forward_mode("dropk")?)?;
                let deviations = pipeline::layer_deviation_table(&model, &embeds[0], cfg.seed)?;
                let mean = if deviations.is_empty() {
                    0.0
                } else {
                    deviations.iter().map(|(_, d)| d).sum::<f64>() / deviations.len() as f64
                };
                let merge = MergeReport {
                    exact_accuracy: exact,
                    dropk_accuracy: dropk,
                    mean_layer_deviation: mean,
                    per_layer_deviation: deviations,
                };
                report["fidelity"] = serde_json::to_value(&merge).unwrap();
                println!(
                    "exact acc {exact:.4}, dropk acc {dropk:.4}, mean layer deviation {mean:.3e}"
                );
            }
            std::fs::write(dir.join("merge.json"), serde_json::to_string_pretty(&report).unwrap() + "\n")?;
            println!("merged checkpoint → {}", merged_path.display());
            Ok(())
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Dimension(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Numeric { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
