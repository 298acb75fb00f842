//! Backbone hyperparameters.

use crate::error::{Error, Result};
use crate::peft::FusionHeadConfig;

/// Configuration of the toy point-cloud transformer: patch embedding via
/// FPS + nearest-point grouping + shared MLP, pre-norm attention blocks,
/// and a fusion head feeding the classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Number of patches G.
    pub patches: usize,
    /// Points per patch.
    pub group_size: usize,
    pub classes: usize,
    /// Neighbor count of the K-Rectify graph over patch centers.
    pub knn_k: usize,
}

impl ModelConfig {
    pub fn with_classes(classes: usize) -> Self {
        Self {
            depth: 4,
            embed_dim: 96,
            heads: 4,
            ffn_ratio: 4,
            patches: 32,
            group_size: 8,
            classes,
            knn_k: 4,
        }
    }

    /// Small model for gradient checks and fast tests.
    pub fn tiny(classes: usize) -> Self {
        Self {
            depth: 2,
            embed_dim: 16,
            heads: 2,
            ffn_ratio: 4,
            patches: 6,
            group_size: 4,
            classes,
            knn_k: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.embed_dim == 0 || self.patches == 0 || self.group_size == 0 {
            return Err(Error::config("model dims must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.knn_k == 0 || self.knn_k >= self.patches {
            return Err(Error::config(format!(
                "knn_k {} must satisfy 1 ≤ k ≤ patches−1 ({})",
                self.knn_k,
                self.patches - 1
            )));
        }
        self.fusion()?;
        Ok(())
    }

    pub fn fusion(&self) -> Result<FusionHeadConfig> {
        FusionHeadConfig::default_for_depth(self.depth)
    }

    pub fn ffn_dim(&self) -> usize {
        self.embed_dim * self.ffn_ratio
    }

    pub fn head_in_dim(&self) -> usize {
        2 * self.embed_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::with_classes(6).validate().unwrap();
        ModelConfig::tiny(3).validate().unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = ModelConfig::with_classes(6);
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::with_classes(6);
        cfg.knn_k = 32;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::with_classes(1).validate().is_err());
    }
}
