//! Run reports: one JSON per run. Wall-clock is the only
//! non-reproducible field and is excluded from golden comparisons.

use std::path::Path;

use most_core::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MergeReport {
    /// Test accuracy with the exact merged forward (token mixes kept).
    pub exact_accuracy: f64,
    /// Test accuracy with the dropK merged forward (single dense matmul).
    pub dropk_accuracy: f64,
    /// Mean relative output deviation `‖exact − dropK‖/‖exact‖` over the
    /// reparameterized layers.
    pub mean_layer_deviation: f64,
    pub per_layer_deviation: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub trainable_params: usize,
    pub total_params: usize,
    pub per_epoch_loss: Vec<f64>,
    pub final_train_accuracy: f64,
    pub final_test_accuracy: f64,
    /// Mean local feature distance at the final block over the test set.
    pub local_feature_distance: Option<f64>,
    pub merge: Option<MergeReport>,
    /// Excluded from determinism comparisons.
    pub wall_clock_seconds: f64,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("cannot parse report {}: {e}", path.display())))
    }

    /// The report with wall-clock zeroed, for byte-level golden comparison.
    pub fn comparable(&self) -> Self {
        let mut c = self.clone();
        c.wall_clock_seconds = 0.0;
        c
    }
}
