//! The local-feature-distance diagnostic: how strongly each fine-tuned
//! checkpoint smooths features across KNN neighborhoods, next to its
//! accuracy. Emits CSV; plotting happens elsewhere.

use std::path::{Path, PathBuf};

use most_core::backbone::ForwardMode;
use most_core::error::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{evaluate, load_model_for_eval, mean_feature_distance, precompute_embeddings};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiagnoseRow {
    pub method: String,
    pub local_feature_distance: f64,
    pub accuracy: f64,
}

pub fn run_diagnose(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    data_dir: &Path,
) -> Result<Vec<DiagnoseRow>> {
    if checkpoints.len() < 2 {
        return Err(Error::config(
            "diagnose needs at least two fine-tuned checkpoints to compare",
        ));
    }
    let test = crate::dataset::load(&data_dir.join("test.mspc"))?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let model = load_model_for_eval(cfg, path)?;
        let embeds = precompute_embeddings(&model, &test)?;
        let lfd = mean_feature_distance(&model, &test, &embeds, ForwardMode::Train)?;
        let accuracy = evaluate(&model, &test, &embeds, ForwardMode::Train)?;
        let method = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("checkpoint")
            .to_string();
        rows.push(DiagnoseRow { method, local_feature_distance: lfd, accuracy });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[DiagnoseRow]) -> String {
    let mut out = String::from("method,local_feature_distance,accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            r.method, r.local_feature_distance, r.accuracy
        ));
    }
    out
}
