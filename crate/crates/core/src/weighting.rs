//! Loss-based data reweighting.
//!
//! Each forgetting example gets weight exp(-eval_loss / tau), normalized
//! within the minibatch, so low-loss (hard-to-forget) examples receive the
//! larger share of the forgetting gradient. The static variant evaluates
//! losses once on the original model; the dynamic variant re-evaluates on
//! the current unlearned model every step, reusing the forward pass the
//! objective already computed.

use crate::dataset::DatasetView;
use crate::diffusion_eval::static_eval_loss;
use crate::error::{CoreError, Result};
use crate::models::classifier::per_sample_ce_view;
use crate::models::{ClassifierModel, DiffusionModel};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Raw weights are clamped here before normalization so a batch cannot
/// collapse to all-zero at tiny temperatures.
pub const WEIGHT_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariant {
    /// Uniform weights; recovers the unweighted objective exactly.
    Off,
    /// Weights from reference losses on the original model.
    Static,
    /// Weights from evaluation losses on the current unlearned model.
    Dynamic,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightingConfig {
    pub tau: f64,
    pub variant: WeightVariant,
}

impl WeightingConfig {
    pub fn off() -> Self {
        Self {
            tau: 1.0,
            variant: WeightVariant::Off,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// exp(-eval_loss / tau); in (0,1], decreasing in the loss.
pub fn raw_weight(eval_loss: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if eval_loss < 0.0 || !eval_loss.is_finite() {
        return Err(CoreError::InvalidArgument(format!(
            "evaluation loss must be finite and nonnegative, got {eval_loss}"
        )));
    }
    Ok((-eval_loss / tau).exp())
}

/// Normalize positive raw weights to sum to one.
pub fn normalize_batch_weights(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(CoreError::InvalidArgument(
            "cannot normalize an empty batch".into(),
        ));
    }
    let clamped: Vec<f64> = raw.iter().map(|&w| w.max(WEIGHT_FLOOR)).collect();
    let sum: f64 = clamped.iter().sum();
    Ok(clamped.into_iter().map(|w| w / sum).collect())
}

/// Weights for one batch from current evaluation losses:
/// normalize(exp(-l_i / tau)).
///
/// Computed with losses shifted by the batch minimum, which leaves the
/// normalized result unchanged analytically and keeps exp() in range at
/// small tau.
pub fn dynamic_batch_weights(eval_losses: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if eval_losses.is_empty() {
        return Err(CoreError::InvalidArgument("empty batch".into()));
    }
    let min = eval_losses.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(CoreError::InvalidArgument(
            "evaluation losses must be finite".into(),
        ));
    }
    let raw: Vec<f64> = eval_losses
        .iter()
        .map(|&l| (-(l - min) / tau).exp())
        .collect();
    normalize_batch_weights(&raw)
}

/// Reference loss and raw weight for one example.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightEntry {
    pub reference_loss: f64,
    pub raw_weight: f64,
}

/// Precomputed static weights over the forgetting set, keyed by global
/// example index.
#[derive(Debug, Clone)]
pub struct WeightTable {
    pub tau: f64,
    pub entries: BTreeMap<usize, WeightEntry>,
    pub source_model_digest: String,
}

impl WeightTable {
    pub fn raw_weight_for(&self, index: usize) -> Result<f64> {
        self.entries
            .get(&index)
            .map(|e| e.raw_weight)
            .ok_or(CoreError::IncompleteTable(index))
    }

    /// Persist as CSV (index, reference_loss, raw_weight) with a JSON
    /// header file alongside.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
        w.write_record(["index", "reference_loss", "raw_weight"])?;
        for (idx, e) in &self.entries {
            w.write_record([
                idx.to_string(),
                format!("{:.17e}", e.reference_loss),
                format!("{:.17e}", e.raw_weight),
            ])?;
        }
        w.flush()?;
        let header = serde_json::json!({
            "tau": self.tau,
            "variant": "static",
            "model_digest": self.source_model_digest,
        });
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&header)?,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<WeightTable> {
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let tau = header["tau"].as_f64().ok_or_else(|| CoreError::Malformed {
            path: stem.display().to_string(),
            reason: "missing tau".into(),
        })?;
        let digest = header["model_digest"].as_str().unwrap_or("").to_string();
        let mut rdr = csv::Reader::from_path(stem.with_extension("csv"))?;
        let mut entries = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let idx: usize = rec[0].parse().map_err(|_| CoreError::Malformed {
                path: stem.display().to_string(),
                reason: format!("bad index {}", &rec[0]),
            })?;
            let reference_loss: f64 = rec[1].parse().unwrap_or(f64::NAN);
            let raw_weight: f64 = rec[2].parse().unwrap_or(f64::NAN);
            entries.insert(
                idx,
                WeightEntry {
                    reference_loss,
                    raw_weight,
                },
            );
        }
        Ok(WeightTable {
            tau,
            entries,
            source_model_digest: digest,
        })
    }
}

/// Static table for a classifier: reference loss is per-example
/// cross-entropy on the original model.
pub fn build_static_table_classifier(
    model_o: &ClassifierModel,
    forget_view: &DatasetView<'_>,
    tau: f64,
) -> Result<WeightTable> {
    if !(tau > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if forget_view.is_empty() {
        return Err(CoreError::EmptyForgetSet("static weight table".into()));
    }
    let losses = per_sample_ce_view(model_o, forget_view, 256);
    let mut entries = BTreeMap::new();
    for (pos, &idx) in forget_view.indices.iter().enumerate() {
        let l = losses[pos];
        entries.insert(
            idx,
            WeightEntry {
                reference_loss: l,
                raw_weight: raw_weight(l, tau)?,
            },
        );
    }
    Ok(WeightTable {
        tau,
        entries,
        source_model_digest: unlearn_nn::checkpoint::digest(&model_o.params),
    })
}

/// Static table for a diffusion model: reference loss is the uniform
/// timestep average of the epsilon loss on the original model.
pub fn build_static_table_diffusion(
    model_o: &DiffusionModel,
    forget_view: &DatasetView<'_>,
    tau: f64,
    noise_seed: u64,
    grid: Option<&[usize]>,
) -> Result<WeightTable> {
    if !(tau > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if forget_view.is_empty() {
        return Err(CoreError::EmptyForgetSet("static weight table".into()));
    }
    let mut entries = BTreeMap::new();
    for pos in 0..forget_view.len() {
        let idx = forget_view.indices[pos];
        let (x, y) = forget_view.gather(&[pos]);
        let l = static_eval_loss(model_o, &x, y[0], idx, noise_seed, grid)?;
        entries.insert(
            idx,
            WeightEntry {
                reference_loss: l,
                raw_weight: raw_weight(l, tau)?,
            },
        );
    }
    Ok(WeightTable {
        tau,
        entries,
        source_model_digest: unlearn_nn::checkpoint::digest(&model_o.params),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_weight_analytic_values() {
        assert_eq!(raw_weight(0.0, 3.0).unwrap(), 1.0);
        assert!((raw_weight(1.0, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-12);
        let tau = 2.5;
        assert!((raw_weight(tau * (2.0f64).ln(), tau).unwrap() - 0.5).abs() < 1e-12);
        assert!(raw_weight(1.0, 0.0).is_err());
        assert!(raw_weight(1.0, -2.0).is_err());
        assert!(raw_weight(-0.5, 1.0).is_err());
    }

    #[test]
    fn normalize_simple_cases() {
        let w = normalize_batch_weights(&[0.3, 0.3]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = normalize_batch_weights(&[1.0, 0.5]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(normalize_batch_weights(&[]).is_err());
    }

    #[test]
    fn dynamic_weights_composed_cases() {
        let w = dynamic_batch_weights(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let tau = 1.7;
        let w = dynamic_batch_weights(&[0.0, tau * (2.0f64).ln()], tau).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
        // tau -> infinity limit: uniform
        let w = dynamic_batch_weights(&[0.1, 5.0, 2.0], 1e9).unwrap();
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn tiny_tau_does_not_collapse_to_zero() {
        let w = dynamic_batch_weights(&[100.0, 200.0, 300.0], 1e-6).unwrap();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(w[0] > 0.999);
    }
}
