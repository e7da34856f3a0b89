use serde::{Deserialize, Serialize};

use crate::grid::{FeatureTable, Features, N_FEATURES};

/// Features whose training std falls below this are centered only.
pub const MIN_STD: f64 = 1e-12;

/// Per-feature z-score fitted on training records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Features,
    pub std: Features,
}

impl Standardizer {
    pub fn identity() -> Self {
        Standardizer {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }

    /// Mean and population std of each feature. Panics on an empty input.
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a Features>) -> Self {
        let rows: Vec<&Features> = features.into_iter().collect();
        assert!(!rows.is_empty(), "standardizer needs at least one record");
        let n = rows.len() as f64;
        let mut mean = [0.0; N_FEATURES];
        for r in &rows {
            for k in 0..N_FEATURES {
                mean[k] += r[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; N_FEATURES];
        for r in &rows {
            for k in 0..N_FEATURES {
                let d = r[k] - mean[k];
                var[k] += d * d;
            }
        }
        let std = var.map(|v| (v / n).sqrt());
        Standardizer { mean, std }
    }

    pub fn apply(&self, f: &Features) -> Features {
        let mut out = [0.0; N_FEATURES];
        for k in 0..N_FEATURES {
            let centered = f[k] - self.mean[k];
            out[k] = if self.std[k] < MIN_STD { centered } else { centered / self.std[k] };
        }
        out
    }

    /// Same transform applied to every record of the table.
    pub fn apply_table(&self, table: &FeatureTable) -> FeatureTable {
        table.map_features(|f| self.apply(f))
    }
}

/// Fits on `train` and transforms `apply_to` with the training statistics.
pub fn standardize_features<'a>(
    train: impl IntoIterator<Item = &'a Features>,
    apply_to: &FeatureTable,
) -> (FeatureTable, Standardizer) {
    let s = Standardizer::fit(train);
    (s.apply_table(apply_to), s)
}
