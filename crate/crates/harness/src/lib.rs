//! Experiment harness: synthetic data generation, pretrain/fine-tune/eval
//! pipelines, PEFT baselines, diagnostics, parameter audits, and throughput
//! benchmarks around the `most-core` toolkit.

pub mod audit;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod diagnose;
pub mod pipeline;
pub mod report;
