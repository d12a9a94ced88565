//! Classifier training, the retrain oracle, and per-example cross-entropy.

use crate::dataset::DatasetView;
use crate::error::{CoreError, Result};
use crate::mathops::{argmax_rows, ce_from_logits, ce_grad};
use crate::models::cnn::{ClassifierArch, ClassifierModel};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use unlearn_nn::layers::Image;
use unlearn_nn::optim::Sgd;
use unlearn_nn::params::GradSet;
use unlearn_nn::rng::{derive_seed, derive_seed_n, rng_from_seed};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: ClassifierArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 256,
            seed: 0,
            arch: ClassifierArch::SmallCnn,
        }
    }
}

impl TrainConfig {
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A trained classifier: parameters plus the provenance needed to reproduce
/// or verify it.
#[derive(Debug)]
pub struct ClassifierCheckpoint {
    pub model: ClassifierModel,
    pub architecture_id: String,
    pub train_config_digest: String,
    pub rng_seed: u64,
}

impl ClassifierCheckpoint {
    pub fn params_digest(&self) -> String {
        unlearn_nn::checkpoint::digest(&self.model.params)
    }
}

/// One row of the training log CSV (epoch, split, loss, accuracy, wall).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub wall_seconds: f64,
}

pub type TrainLog = Vec<TrainLogRow>;

pub fn save_train_log(log: &TrainLog, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "split", "loss", "accuracy", "wall_seconds"])?;
    for row in log {
        w.write_record([
            row.epoch.to_string(),
            row.split.clone(),
            format!("{:.6}", row.loss),
            row.accuracy.map(|a| format!("{a:.4}")).unwrap_or_default(),
            format!("{:.3}", row.wall_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Train a classifier on a dataset view with plain seeded SGD.
///
/// The retrain oracle is this function applied to the retain indices.
/// Epoch batching reshuffles from a per-epoch derived seed, so runs are
/// reproducible end to end.
pub fn train_classifier(
    view: &DatasetView<'_>,
    cfg: &TrainConfig,
) -> Result<(ClassifierCheckpoint, TrainLog)> {
    if view.is_empty() {
        return Err(CoreError::InvalidArgument(
            "training view is empty".into(),
        ));
    }
    let (c, h, w) = view.dataset.example_shape();
    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, "classifier-init"));
    let mut model = ClassifierModel::new(cfg.arch, view.dataset.num_classes, (c, h, w), &mut init_rng);

    let mut opt = Sgd::new(cfg.lr as f32, cfg.momentum as f32);
    let mut gs = GradSet::zeros_like(&model.params);
    let mut log = TrainLog::new();
    let start = Instant::now();
    let shuffle_root = derive_seed(cfg.seed, "classifier-shuffle");

    for epoch in 0..cfg.epochs {
        let order = shuffled_positions(view.len(), shuffle_root, epoch as u64);
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = view.gather(chunk);
            let (logits, ctx) = model.forward(&x);
            let losses = ce_from_logits(&logits, &y);
            let batch_loss: f64 = losses.iter().sum::<f64>() / losses.len() as f64;
            if !batch_loss.is_finite() {
                return Err(CoreError::TrainingDiverged { epoch });
            }
            epoch_loss += batch_loss * losses.len() as f64;
            seen += losses.len();
            let coeff = vec![1.0 / losses.len() as f64; losses.len()];
            let dlogits = ce_grad(&logits, &y, &coeff);
            gs.zero();
            model.backward(&mut gs, &ctx, &dlogits);
            opt.step(&mut model.params, &gs, None);
        }
        let acc = train_accuracy(&model, view, cfg.batch_size);
        log.push(TrainLogRow {
            epoch,
            split: "train".into(),
            loss: epoch_loss / seen as f64,
            accuracy: Some(acc),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }

    Ok((
        ClassifierCheckpoint {
            architecture_id: cfg.arch.id().to_string(),
            train_config_digest: cfg.digest(),
            rng_seed: cfg.seed,
            model,
        },
        log,
    ))
}

fn shuffled_positions(n: usize, root: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom as _;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed_n(root, &[epoch]));
    order.shuffle(&mut rng);
    order
}

fn train_accuracy(model: &ClassifierModel, view: &DatasetView<'_>, batch: usize) -> f64 {
    let mut correct = 0usize;
    let positions: Vec<usize> = (0..view.len()).collect();
    for chunk in positions.chunks(batch.max(1)) {
        let (x, y) = view.gather(chunk);
        let preds = argmax_rows(&model.logits(&x));
        correct += preds.iter().zip(y.iter()).filter(|(p, t)| p == t).count();
    }
    correct as f64 / view.len() as f64 * 100.0
}

/// Per-example cross-entropy of a batch, each value >= 0 and finite.
pub fn per_sample_ce(model: &ClassifierModel, x: &Image, labels: &[usize]) -> Vec<f64> {
    let logits = model.logits(x);
    ce_from_logits(&logits, labels)
}

/// Per-example cross-entropy over a whole view, in view order.
pub fn per_sample_ce_view(
    model: &ClassifierModel,
    view: &DatasetView<'_>,
    batch: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(view.len());
    let positions: Vec<usize> = (0..view.len()).collect();
    for chunk in positions.chunks(batch.max(1)) {
        let (x, y) = view.gather(chunk);
        out.extend(per_sample_ce(model, &x, &y));
    }
    out
}

/// Logits over a whole view, in view order.
pub fn logits_view(model: &ClassifierModel, view: &DatasetView<'_>, batch: usize) -> Array2<f32> {
    let mut out = Array2::<f32>::zeros((view.len(), model.num_classes));
    let positions: Vec<usize> = (0..view.len()).collect();
    let mut row = 0;
    for chunk in positions.chunks(batch.max(1)) {
        let (x, _) = view.gather(chunk);
        let logits = model.logits(&x);
        for r in logits.rows() {
            out.row_mut(row).assign(&r);
            row += 1;
        }
    }
    out
}

/// Train the external probe classifier used by generation metrics; same
/// contract as [`train_classifier`].
pub fn train_external_classifier(
    view: &DatasetView<'_>,
    cfg: &TrainConfig,
) -> Result<(ClassifierCheckpoint, TrainLog)> {
    train_classifier(view, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_shapes10, Dataset};
    use ndarray::Array4;

    fn tiny_two_class(n: usize) -> Dataset {
        // linearly separable: class = sign of mean brightness
        let mut features = Array4::<f32>::zeros((n, 1, 16, 16));
        let mut labels = vec![0u8; n];
        for i in 0..n {
            let v = if i % 2 == 0 { 0.2 } else { 0.8 };
            features.index_axis_mut(ndarray::Axis(0), i).fill(v);
            labels[i] = (i % 2) as u8;
        }
        Dataset::new("two_class", features, labels, 2, n)
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let d = tiny_two_class(40);
        let cfg = TrainConfig {
            epochs: 50,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            seed: 3,
            arch: ClassifierArch::SmallCnn,
        };
        let (ckpt, log) = train_classifier(&d.train_view(), &cfg).unwrap();
        let acc = log.last().unwrap().accuracy.unwrap();
        assert_eq!(acc, 100.0, "separable set must be fully fit, got {acc}");
        assert_eq!(log.len(), 50);
        let _ = ckpt;
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let d = tiny_two_class(10);
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        cfg.seed = 5;
        let (ckpt, log) = train_classifier(&d.train_view(), &cfg).unwrap();
        assert!(log.is_empty());
        // fresh init with the same seed must match exactly
        let mut rng = rng_from_seed(derive_seed(5, "classifier-init"));
        let fresh = ClassifierModel::new(ClassifierArch::SmallCnn, 2, (1, 16, 16), &mut rng);
        assert_eq!(fresh.params.flatten(), ckpt.model.params.flatten());
    }

    #[test]
    fn same_seed_same_parameters() {
        let d = synthetic_shapes10(64, 0, 16, 1);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.02,
            momentum: 0.9,
            batch_size: 16,
            seed: 11,
            arch: ClassifierArch::SmallCnn,
        };
        let (a, _) = train_classifier(&d.train_view(), &cfg).unwrap();
        let (b, _) = train_classifier(&d.train_view(), &cfg).unwrap();
        assert_eq!(a.model.params.flatten(), b.model.params.flatten());
        assert_eq!(a.params_digest(), b.params_digest());
    }

    #[test]
    fn per_sample_ce_matches_loop_evaluation() {
        let d = synthetic_shapes10(20, 0, 16, 2);
        let mut rng = rng_from_seed(7);
        let model = ClassifierModel::new(ClassifierArch::SmallCnn, 10, (1, 16, 16), &mut rng);
        let view = d.train_view();
        let batched = per_sample_ce_view(&model, &view, 8);
        for i in 0..view.len() {
            let (x, y) = view.gather(&[i]);
            let single = per_sample_ce(&model, &x, &y);
            assert!((batched[i] - single[0]).abs() < 1e-6);
            assert!(batched[i] >= 0.0 && batched[i].is_finite());
        }
    }
}
