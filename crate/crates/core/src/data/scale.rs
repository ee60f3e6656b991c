use serde::{Deserialize, Serialize};

use super::{MarketPanel, FEATURE_NAMES};
use crate::diffcore::Tensor;

/// Per-feature z-score fitted on a range of periods across all stocks.
/// Columns in `log_columns` are replaced by `ln(1 + x)` first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub log_columns: Vec<usize>,
}

impl FeatureScaler {
    pub fn identity(n_features: usize) -> Self {
        Self {
            mean: vec![0.0; n_features],
            std: vec![1.0; n_features],
            log_columns: Vec::new(),
        }
    }

    /// Fits on periods `0..fit_end`, taking logs of the volume column when
    /// the panel has one.
    pub fn fit(panel: &MarketPanel, fit_end: usize) -> Self {
        let volume = FEATURE_NAMES.iter().position(|&n| n == "volume").expect("volume is a standard feature");
        let logs: Vec<usize> = (volume < panel.n_features()).then_some(volume).into_iter().collect();
        Self::fit_with(panel, fit_end, &logs)
    }

    pub fn fit_with(panel: &MarketPanel, fit_end: usize, log_columns: &[usize]) -> Self {
        let d = panel.n_features();
        let mut scaler = Self {
            log_columns: log_columns.to_vec(),
            ..Self::identity(d)
        };
        let rows: Vec<Vec<f64>> = (0..panel.n_stocks())
            .flat_map(|i| (0..fit_end).map(move |t| (i, t)))
            .map(|(i, t)| scaler.raw(panel.feature(i, t)))
            .collect();
        let n = rows.len() as f64;
        for k in 0..d {
            let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n;
            scaler.mean[k] = mean;
            scaler.std[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        scaler
    }

    fn raw(&self, row: &[f64]) -> Vec<f64> {
        let mut row = row.to_vec();
        for &k in &self.log_columns {
            row[k] = row[k].ln_1p();
        }
        row
    }

    /// Scaled copy of the panel features, `[I, T, D]`.
    pub fn transform(&self, panel: &MarketPanel) -> Tensor {
        let d = panel.n_features();
        let mut out = panel.features().clone();
        for row in out.data_mut().chunks_mut(d) {
            let raw = self.raw(row);
            for (k, v) in row.iter_mut().enumerate() {
                *v = (raw[k] - self.mean[k]) / self.std[k];
            }
        }
        out
    }
}
