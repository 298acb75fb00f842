//! Run configuration: a JSON file echoed verbatim into every report.

use std::path::Path;

use most_core::backbone::ModelConfig;
use most_core::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelSection {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub patches: usize,
    pub group_size: usize,
    pub knn_k: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { depth: 4, embed_dim: 96, heads: 4, ffn_ratio: 4, patches: 32, group_size: 8, knn_k: 4 }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            embed_dim: self.embed_dim,
            heads: self.heads,
            ffn_ratio: self.ffn_ratio,
            patches: self.patches,
            group_size: self.group_size,
            classes,
            knn_k: self.knn_k,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { epochs: 8, lr: 1e-3, weight_decay: 0.05, batch_size: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("cannot parse config {}: {e}", path.display())))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
