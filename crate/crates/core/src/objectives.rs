//! Forgetting/retaining loss pairs and saliency-mask construction.
//!
//! Classifier methods: random labeling fits a wrong label on forgetting
//! data, gradient ascent negates the true-label cross-entropy; both pair
//! with a plain cross-entropy retain term. The diffusion method regresses
//! the conditional epsilon prediction toward a detached wrong-class
//! prediction and retains with the ordinary epsilon loss. Masked variants
//! restrict updates to parameters with large forgetting-gradient magnitude.

use crate::dataset::DatasetView;
use crate::error::{CoreError, Result};
use crate::mathops::{ce_from_logits, ce_grad};
use crate::models::diffusion::{forward_noising, per_example_sq_l2, to_model_range};
use crate::models::{ClassifierModel, DiffusionModel};
use crate::weighting::WeightingConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use unlearn_nn::layers::Image;
use unlearn_nn::params::{GradSet, ParamMask};
use unlearn_nn::rng::{sample_standard_normal, Rng};

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnlearnMethod {
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "RL")]
    Rl,
    #[serde(rename = "GAR")]
    Gar,
    #[serde(rename = "GAR-m")]
    GarM,
    #[serde(rename = "SalUn")]
    SalUn,
}

impl UnlearnMethod {
    /// GA has no retain term.
    pub fn uses_retain(&self) -> bool {
        !matches!(self, UnlearnMethod::Ga)
    }

    pub fn uses_mask(&self) -> bool {
        matches!(self, UnlearnMethod::GarM | UnlearnMethod::SalUn)
    }

    /// Random-labeling family (vs gradient-ascent family).
    pub fn is_rl_family(&self) -> bool {
        matches!(self, UnlearnMethod::Rl | UnlearnMethod::SalUn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classifier,
    Diffusion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnRecipe {
    pub method: UnlearnMethod,
    pub alpha: f64,
    pub weighting: WeightingConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of parameters a saliency mask keeps updatable; only
    /// meaningful for masked methods.
    pub mask_fraction: f64,
    pub seed: u64,
    pub task: TaskKind,
    /// Redraw random wrong labels every step (vs once per epoch).
    #[serde(default = "default_true")]
    pub redraw_labels_per_step: bool,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

fn default_true() -> bool {
    true
}

impl UnlearnRecipe {
    pub fn validate(&self) -> Result<()> {
        self.weighting.validate()?;
        if self.alpha < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "mask_fraction must lie in (0,1], got {}",
                self.mask_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument("batch_size must be positive".into()));
        }
        if self.task == TaskKind::Diffusion && !self.method.is_rl_family() {
            return Err(CoreError::InvalidTask(format!(
                "diffusion unlearning supports RL and SalUn, got {:?}",
                self.method
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("recipe serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<UnlearnRecipe> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

// ---------------------------------------------------------------------------
// Classifier losses
// ---------------------------------------------------------------------------

/// Uniformly draw a label different from each true label.
pub fn draw_wrong_labels(labels: &[usize], num_classes: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(CoreError::InvalidTask(
            "random labeling needs at least two classes".into(),
        ));
    }
    use rand::Rng as _;
    Ok(labels
        .iter()
        .map(|&y| {
            let mut y2 = rng.gen_range(0..num_classes - 1);
            if y2 >= y {
                y2 += 1;
            }
            y2
        })
        .collect())
}

/// Random-labeling forgetting loss: CE against a freshly drawn wrong label.
/// Returns the per-example losses and the labels that were drawn.
pub fn rl_forget_loss(
    model: &ClassifierModel,
    x: &Image,
    labels: &[usize],
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let y_prime = draw_wrong_labels(labels, model.num_classes, rng)?;
    let logits = model.logits(x);
    Ok((ce_from_logits(&logits, &y_prime), y_prime))
}

/// Gradient-ascent forgetting loss: the negated true-label cross-entropy.
pub fn gar_forget_loss(model: &ClassifierModel, x: &Image, labels: &[usize]) -> Vec<f64> {
    let logits = model.logits(x);
    ce_from_logits(&logits, labels)
        .into_iter()
        .map(|l| -l)
        .collect()
}

/// Retaining loss for either task.
pub fn retain_loss_classifier(model: &ClassifierModel, x: &Image, labels: &[usize]) -> Vec<f64> {
    let logits = model.logits(x);
    ce_from_logits(&logits, labels)
}

// ---------------------------------------------------------------------------
// Diffusion forgetting loss
// ---------------------------------------------------------------------------

/// Squared distance between the epsilon predictions under y' and y at the
/// same x_t. The y' branch is the regression target: no gradient flows
/// through it, which `DmForgetParts` preserves by construction (the engine
/// backpropagates only through the y-branch forward pass).
pub struct DmForgetParts {
    pub losses: Vec<f64>,
    /// Detached target predictions (y' branch).
    pub target: Image,
    /// Live predictions (y branch).
    pub pred_y: Image,
    /// Noised input shared by both branches.
    pub x_t: Image,
}

pub fn dm_forget_loss_parts(
    model: &DiffusionModel,
    x: &Image,
    ys: &[usize],
    y_prime: &[usize],
    ts: &[usize],
    noise: &Image,
) -> Result<DmForgetParts> {
    for (a, b) in ys.iter().zip(y_prime.iter()) {
        if a == b {
            return Err(CoreError::InvalidArgument(
                "y' must differ from y in the diffusion forgetting loss".into(),
            ));
        }
    }
    for &t in ts {
        if t < 1 || t > model.t_max() {
            return Err(CoreError::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                model.t_max()
            )));
        }
    }
    let x0 = to_model_range(x);
    let x_t = forward_noising(&model.schedule, &x0, ts, noise);
    let target = model.predict(&x_t, ts, y_prime);
    let pred_y = model.predict(&x_t, ts, ys);
    let losses = per_example_sq_l2(&target, &pred_y);
    Ok(DmForgetParts {
        losses,
        target,
        pred_y,
        x_t,
    })
}

/// Loss-only form of [`dm_forget_loss_parts`].
pub fn dm_forget_loss(
    model: &DiffusionModel,
    x: &Image,
    ys: &[usize],
    y_prime: &[usize],
    ts: &[usize],
    noise: &Image,
) -> Result<Vec<f64>> {
    Ok(dm_forget_loss_parts(model, x, ys, y_prime, ts, noise)?.losses)
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

/// sum_i w_i * forget_i + alpha * mean(retain). Weights must already be
/// normalized; an empty retain batch contributes nothing (GA).
pub fn combined_objective(
    forget_losses: &[f64],
    weights: &[f64],
    retain_losses: &[f64],
    alpha: f64,
) -> Result<f64> {
    if forget_losses.len() != weights.len() {
        return Err(CoreError::ContractViolation(
            "weights and forgetting losses must align".into(),
        ));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-6 {
        return Err(CoreError::ContractViolation(format!(
            "weights must sum to 1, got {wsum}"
        )));
    }
    let forget: f64 = forget_losses
        .iter()
        .zip(weights.iter())
        .map(|(l, w)| l * w)
        .sum();
    let retain = if retain_losses.is_empty() {
        0.0
    } else {
        alpha * retain_losses.iter().sum::<f64>() / retain_losses.len() as f64
    };
    Ok(forget + retain)
}

// ---------------------------------------------------------------------------
// Saliency masks
// ---------------------------------------------------------------------------

/// Binary per-parameter mask marking the top `fraction` of parameters by
/// accumulated forgetting-gradient magnitude at the original model.
pub struct SaliencyMask {
    pub mask: ParamMask,
    pub fraction_kept: f64,
}

fn topk_mask(params: &unlearn_nn::ParamSet, grad_mag: &[f64], fraction: f64) -> SaliencyMask {
    let p = grad_mag.len();
    let k = ((fraction * p as f64).round() as usize).clamp(1, p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        grad_mag[b]
            .partial_cmp(&grad_mag[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut flat = vec![0.0f32; p];
    for &i in &order[..k] {
        flat[i] = 1.0;
    }
    let mask = ParamMask::from_flat(params, &flat);
    SaliencyMask {
        fraction_kept: k as f64 / p as f64,
        mask,
    }
}

/// Classifier saliency: |gradient| of the mean true-label cross-entropy
/// over the forgetting set.
pub fn build_saliency_mask_classifier(
    model_o: &ClassifierModel,
    forget_view: &DatasetView<'_>,
    mask_fraction: f64,
) -> Result<SaliencyMask> {
    if !(mask_fraction > 0.0 && mask_fraction <= 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "mask_fraction must lie in (0,1], got {mask_fraction}"
        )));
    }
    let mut gs = GradSet::zeros_like(&model_o.params);
    let n = forget_view.len() as f64;
    let positions: Vec<usize> = (0..forget_view.len()).collect();
    for chunk in positions.chunks(256) {
        let (x, y) = forget_view.gather(chunk);
        let (logits, ctx) = model_o.forward(&x);
        let coeff = vec![1.0 / n; chunk.len()];
        let dlogits = ce_grad(&logits, &y, &coeff);
        model_o.backward(&mut gs, &ctx, &dlogits);
    }
    let grad_mag: Vec<f64> = gs.flatten().iter().map(|&g| (g as f64).abs()).collect();
    Ok(topk_mask(&model_o.params, &grad_mag, mask_fraction))
}

/// Diffusion saliency: |gradient| of the mean epsilon loss on forgetting
/// data, one seeded (t, eps) draw per example.
pub fn build_saliency_mask_diffusion(
    model_o: &DiffusionModel,
    forget_view: &DatasetView<'_>,
    mask_fraction: f64,
    seed: u64,
) -> Result<SaliencyMask> {
    if !(mask_fraction > 0.0 && mask_fraction <= 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "mask_fraction must lie in (0,1], got {mask_fraction}"
        )));
    }
    let mut gs = GradSet::zeros_like(&model_o.params);
    let n = forget_view.len() as f64;
    let (c, h, w) = model_o.in_shape;
    let mut rng = unlearn_nn::rng::rng_from_seed(seed);
    use rand::Rng as _;
    let positions: Vec<usize> = (0..forget_view.len()).collect();
    for chunk in positions.chunks(64) {
        let (x, y) = forget_view.gather(chunk);
        let ts: Vec<usize> = (0..chunk.len())
            .map(|_| rng.gen_range(1..=model_o.t_max()))
            .collect();
        let mut noise = Image::zeros((chunk.len(), c, h, w));
        sample_standard_normal(&mut rng, noise.as_slice_mut().unwrap());
        let x0 = to_model_range(&x);
        let xt = forward_noising(&model_o.schedule, &x0, &ts, &noise);
        let (pred, ctx) = model_o.predict_with_ctx(&xt, &ts, &y);
        // d/dpred of mean_i ||eps_i - pred_i||^2 = 2 (pred - eps) / N
        let scale = (2.0 / n) as f32;
        let mut dpred = &pred - &noise;
        dpred.mapv_inplace(|v| v * scale);
        model_o
            .unet
            .backward(&model_o.params, &mut gs, &ctx, &dpred);
    }
    let grad_mag: Vec<f64> = gs.flatten().iter().map(|&g| (g as f64).abs()).collect();
    Ok(topk_mask(&model_o.params, &grad_mag, mask_fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_shapes10;
    use crate::models::{ClassifierArch, UnetConfig};
    use unlearn_nn::rng::rng_from_seed;

    fn toy_classifier() -> ClassifierModel {
        let mut rng = rng_from_seed(0);
        ClassifierModel::new(ClassifierArch::SmallCnn, 10, (1, 16, 16), &mut rng)
    }

    #[test]
    fn wrong_labels_avoid_truth_and_two_class_is_deterministic() {
        let mut rng = rng_from_seed(1);
        let y = vec![0usize, 1, 0, 1];
        let y2 = draw_wrong_labels(&y, 2, &mut rng).unwrap();
        assert_eq!(y2, vec![1, 0, 1, 0]);
        assert!(draw_wrong_labels(&y, 1, &mut rng).is_err());
    }

    #[test]
    fn wrong_labels_uniform_over_wrong_classes() {
        let mut rng = rng_from_seed(2);
        let mut counts = [0usize; 10];
        let n = 10_000;
        for _ in 0..n {
            let y2 = draw_wrong_labels(&[4], 10, &mut rng).unwrap()[0];
            assert_ne!(y2, 4);
            counts[y2] += 1;
        }
        let e = n as f64 / 9.0;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != 4)
            .map(|(_, &k)| (k as f64 - e).powi(2) / e)
            .sum();
        // 8 dof, p=0.01 critical value 20.09
        assert!(chi2 < 20.09, "chi2 {chi2}");
    }

    #[test]
    fn gar_is_negated_ce() {
        let model = toy_classifier();
        let d = synthetic_shapes10(8, 0, 16, 3);
        let (x, y) = d.train_view().gather(&[0, 1, 2, 3]);
        let gar = gar_forget_loss(&model, &x, &y);
        let ce = retain_loss_classifier(&model, &x, &y);
        for (g, c) in gar.iter().zip(ce.iter()) {
            assert!((g + c).abs() < 1e-12);
        }
    }

    #[test]
    fn combined_objective_cases() {
        let v = combined_objective(&[3.0, 100.0], &[1.0, 0.0], &[2.0, 2.0], 1.0).unwrap();
        assert!((v - 5.0).abs() < 1e-12);
        let v = combined_objective(&[3.0, 1.0], &[0.5, 0.5], &[2.0], 0.0).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        // uniform weights reduce to the batch mean plus the retain term
        let forget = [1.0, 2.0, 3.0, 6.0];
        let w = [0.25; 4];
        let retain = [0.5, 1.5];
        let alpha = 0.7;
        let v = combined_objective(&forget, &w, &retain, alpha).unwrap();
        let direct = forget.iter().sum::<f64>() / 4.0 + alpha * 1.0;
        assert!((v - direct).abs() < 1e-9);
        // bad weight sum is a contract violation
        assert!(combined_objective(&[1.0], &[0.5], &[], 1.0).is_err());
    }

    #[test]
    fn combined_objective_linear_in_weights_and_alpha() {
        let f = [2.0, 4.0];
        let r = [1.0, 3.0];
        let w1 = [0.3, 0.7];
        let w2 = [0.6, 0.4];
        let mix: Vec<f64> = w1.iter().zip(w2.iter()).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        let v_mix = combined_objective(&f, &mix, &r, 1.0).unwrap();
        let v1 = combined_objective(&f, &w1, &r, 1.0).unwrap();
        let v2 = combined_objective(&f, &w2, &r, 1.0).unwrap();
        assert!((v_mix - 0.5 * (v1 + v2)).abs() < 1e-12);

        let va = combined_objective(&f, &w1, &r, 2.0).unwrap();
        let v0 = combined_objective(&f, &w1, &r, 0.0).unwrap();
        assert!((va - v0 - 2.0 * (v1 - v0)).abs() < 1e-12);
    }

    #[test]
    fn dm_forget_loss_contracts() {
        let mut rng = rng_from_seed(4);
        let model = crate::models::DiffusionModel::new(
            UnetConfig {
                in_c: 1,
                hw: 8,
                base: 4,
                emb_dim: 8,
                num_classes: 4,
            },
            6,
            &mut rng,
        );
        let x = Image::from_elem((2, 1, 8, 8), 0.3);
        let mut noise = Image::zeros((2, 1, 8, 8));
        sample_standard_normal(&mut rng, noise.as_slice_mut().unwrap());
        // y' == y rejected
        assert!(dm_forget_loss(&model, &x, &[1, 2], &[1, 3], &[2, 3], &noise).is_err());
        // capture-and-recompute oracle
        let parts = dm_forget_loss_parts(&model, &x, &[1, 2], &[0, 3], &[2, 3], &noise).unwrap();
        let manual = per_example_sq_l2(&parts.target, &parts.pred_y);
        for (a, b) in parts.losses.iter().zip(manual.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(parts.losses.iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn saliency_mask_full_fraction_is_all_ones() {
        let model = toy_classifier();
        let d = synthetic_shapes10(16, 0, 16, 5);
        let m = build_saliency_mask_classifier(&model, &d.train_view(), 1.0).unwrap();
        assert_eq!(m.fraction_kept, 1.0);
        assert!(m.mask.flatten().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn saliency_mask_fraction_and_topk_ordering() {
        let model = toy_classifier();
        let d = synthetic_shapes10(16, 0, 16, 6);
        let frac = 0.5;
        let m = build_saliency_mask_classifier(&model, &d.train_view(), frac).unwrap();
        let p = model.params.num_scalars();
        assert!((m.fraction_kept - frac).abs() <= 1.0 / p as f64);

        // sort-oracle: recompute the gradient magnitudes and verify that
        // every kept entry dominates every dropped entry
        let mut gs = GradSet::zeros_like(&model.params);
        let view = d.train_view();
        let (x, y) = view.gather_all();
        let (logits, ctx) = model.forward(&x);
        let coeff = vec![1.0 / view.len() as f64; view.len()];
        let dlogits = ce_grad(&logits, &y, &coeff);
        model.backward(&mut gs, &ctx, &dlogits);
        let mags: Vec<f64> = gs.flatten().iter().map(|&g| (g as f64).abs()).collect();
        let flat = m.mask.flatten();
        let kept_min = flat
            .iter()
            .zip(mags.iter())
            .filter(|(&f, _)| f == 1.0)
            .map(|(_, &g)| g)
            .fold(f64::INFINITY, f64::min);
        let dropped_max = flat
            .iter()
            .zip(mags.iter())
            .filter(|(&f, _)| f == 0.0)
            .map(|(_, &g)| g)
            .fold(0.0f64, f64::max);
        assert!(kept_min >= dropped_max);
    }
}
