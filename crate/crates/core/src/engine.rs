//! The unlearning engine: batched forgetting with (re)weighting, batched
//! retaining, masked updates and trajectory logging.
//!
//! One run owns a copy of the original parameters and a derived RNG tree,
//! so identical (recipe, seed, inputs) reproduce identical trajectories
//! and final checksums.

use crate::dataset::{Dataset, DatasetView};
use crate::diffusion_eval::{rescale_loss, TimestepLossTable, TimestepSampler};
use crate::error::{CoreError, Result};
use crate::mathops::{argmax_rows, ce_from_logits, ce_grad};
use crate::models::classifier::ClassifierCheckpoint;
use crate::models::diffusion::{forward_noising, per_example_sq_l2, to_model_range};
use crate::models::DiffusionCheckpoint;
use crate::objectives::{
    build_saliency_mask_classifier, build_saliency_mask_diffusion, combined_objective,
    draw_wrong_labels, OptimizerKind, TaskKind, UnlearnRecipe,
};
use crate::splits::SplitSpec;
use crate::weighting::{dynamic_batch_weights, normalize_batch_weights, WeightTable, WeightVariant};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;
use unlearn_nn::layers::Image;
use unlearn_nn::optim::{Adam, Optimizer, Sgd};
use unlearn_nn::params::{GradSet, ParamMask};
use unlearn_nn::rng::{derive_seed, derive_seed_n, rng_from_seed, sample_standard_normal};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Accuracy on the forgetting set after the epoch (classifier tasks).
    pub ua: Option<f64>,
    pub forget_loss_mean: f64,
    pub retain_loss_mean: Option<f64>,
    /// Cumulative wall-clock seconds since the unlearning phase started.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSummary {
    pub epoch: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnlearnRun {
    pub recipe_digest: String,
    pub start_checkpoint: String,
    pub final_checkpoint: String,
    pub trajectory: Vec<EpochRecord>,
    pub weight_snapshots: Vec<WeightSummary>,
}

impl UnlearnRun {
    pub fn save_trajectory(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "epoch",
            "ua",
            "forget_loss_mean",
            "retain_loss_mean",
            "wall_seconds",
        ])?;
        for r in &self.trajectory {
            w.write_record([
                r.epoch.to_string(),
                r.ua.map(|u| format!("{u:.4}")).unwrap_or_default(),
                format!("{:.6}", r.forget_loss_mean),
                r.retain_loss_mean
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default(),
                format!("{:.3}", r.wall_seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Deterministic paired minibatches for one epoch: every forgetting example
/// appears exactly once; one retain batch (drawn with replacement across
/// steps) accompanies each forget batch.
pub struct BatchPairs {
    pub forget: Vec<Vec<usize>>,
    pub retain: Vec<Vec<usize>>,
}

pub fn pair_batches(
    n_forget: usize,
    n_retain: Option<usize>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchPairs> {
    if n_forget == 0 {
        return Err(CoreError::EmptyForgetSet("pair_batches".into()));
    }
    let bs = if batch_size > n_forget {
        log::warn!("batch_size {batch_size} larger than forget set {n_forget}; clamping");
        n_forget
    } else {
        batch_size
    };
    use rand::seq::SliceRandom as _;
    let mut order: Vec<usize> = (0..n_forget).collect();
    let mut rng = rng_from_seed(derive_seed_n(derive_seed(seed, "pair-forget"), &[epoch as u64]));
    order.shuffle(&mut rng);
    let forget: Vec<Vec<usize>> = order.chunks(bs).map(|c| c.to_vec()).collect();

    let retain = match n_retain {
        None => vec![Vec::new(); forget.len()],
        Some(nr) => {
            if nr == 0 {
                return Err(CoreError::InvalidArgument("empty retain view".into()));
            }
            let rbs = batch_size.min(nr);
            let root = derive_seed(seed, "pair-retain");
            forget
                .iter()
                .enumerate()
                .map(|(step, _)| {
                    let mut r =
                        rng_from_seed(derive_seed_n(root, &[epoch as u64, step as u64]));
                    rand::seq::index::sample(&mut r, nr, rbs).into_vec()
                })
                .collect()
        }
    };
    Ok(BatchPairs { forget, retain })
}

fn make_optimizer(recipe: &UnlearnRecipe) -> Optimizer {
    match recipe.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(recipe.lr as f32, recipe.momentum as f32)),
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(recipe.lr as f32)),
    }
}

fn weight_summary(epoch: usize, mut ws: Vec<f64>) -> WeightSummary {
    ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = *ws.first().unwrap();
    let max = *ws.last().unwrap();
    let median = ws[ws.len() / 2];
    WeightSummary {
        epoch,
        min,
        median,
        max,
    }
}

fn batch_weights(
    variant: WeightVariant,
    tau: f64,
    eval_losses: &[f64],
    global_indices: &[usize],
    static_table: Option<&WeightTable>,
) -> Result<Vec<f64>> {
    let n = eval_losses.len();
    match variant {
        WeightVariant::Off => Ok(vec![1.0 / n as f64; n]),
        WeightVariant::Dynamic => dynamic_batch_weights(eval_losses, tau),
        WeightVariant::Static => {
            let table = static_table.ok_or_else(|| {
                CoreError::MissingTable("static weighting requires a prebuilt weight table".into())
            })?;
            let raw: Vec<f64> = global_indices
                .iter()
                .map(|&gi| table.raw_weight_for(gi))
                .collect::<Result<_>>()?;
            normalize_batch_weights(&raw)
        }
    }
}

// ---------------------------------------------------------------------------
// Classifier unlearning
// ---------------------------------------------------------------------------

pub fn run_unlearning_classifier(
    model_o: &ClassifierCheckpoint,
    dataset: &Dataset,
    split: &SplitSpec,
    recipe: &UnlearnRecipe,
    static_table: Option<&WeightTable>,
) -> Result<(ClassifierCheckpoint, UnlearnRun)> {
    recipe.validate()?;
    if recipe.task != TaskKind::Classifier {
        return Err(CoreError::InvalidTask(
            "classifier engine invoked with a diffusion recipe".into(),
        ));
    }
    if recipe.weighting.variant == WeightVariant::Static && static_table.is_none() {
        return Err(CoreError::MissingTable(
            "static weighting requires a prebuilt weight table".into(),
        ));
    }
    split.validate(dataset)?;

    let forget_view = dataset.view(split.forget.clone());
    let retain_view = dataset.view(split.retain.clone());
    let start_digest = model_o.params_digest();

    let mut model = model_o.model.clone();
    let mask: Option<ParamMask> = if recipe.method.uses_mask() {
        Some(
            build_saliency_mask_classifier(&model_o.model, &forget_view, recipe.mask_fraction)?
                .mask,
        )
    } else {
        None
    };

    let mut opt = make_optimizer(recipe);
    let mut gs = GradSet::zeros_like(&model.params);
    let mut trajectory = Vec::new();
    let mut weight_snapshots = Vec::new();
    let start = Instant::now();
    let label_root = derive_seed(recipe.seed, "rl-labels");

    for epoch in 0..recipe.epochs {
        let pairs = pair_batches(
            forget_view.len(),
            recipe.method.uses_retain().then(|| retain_view.len()),
            recipe.batch_size,
            recipe.seed,
            epoch,
        )?;
        // per-epoch wrong labels when not redrawing each step
        let mut epoch_labels: Option<Vec<usize>> = None;
        if recipe.method.is_rl_family() && !recipe.redraw_labels_per_step {
            let mut rng = rng_from_seed(derive_seed_n(label_root, &[epoch as u64]));
            let all_labels: Vec<usize> = forget_view
                .indices
                .iter()
                .map(|&gi| dataset.labels[gi] as usize)
                .collect();
            epoch_labels = Some(draw_wrong_labels(&all_labels, dataset.num_classes, &mut rng)?);
        }

        let mut forget_loss_sum = 0.0;
        let mut forget_count = 0usize;
        let mut retain_loss_sum = 0.0;
        let mut retain_count = 0usize;
        let mut epoch_weights = Vec::new();

        for (step, (fb, rb)) in pairs.forget.iter().zip(pairs.retain.iter()).enumerate() {
            let (x_f, y_f) = forget_view.gather(fb);
            let global = forget_view.global_indices(fb);
            let (logits_f, ctx_f) = model.forward(&x_f);
            let eval_losses = ce_from_logits(&logits_f, &y_f);

            // forgetting loss and the label column the gradient flows to
            let (forget_losses, grad_labels, grad_sign): (Vec<f64>, Vec<usize>, f64) =
                if recipe.method.is_rl_family() {
                    let y_prime = match &epoch_labels {
                        Some(all) => fb.iter().map(|&p| all[p]).collect(),
                        None => {
                            let mut rng = rng_from_seed(derive_seed_n(
                                label_root,
                                &[epoch as u64, step as u64],
                            ));
                            draw_wrong_labels(&y_f, dataset.num_classes, &mut rng)?
                        }
                    };
                    let losses = ce_from_logits(&logits_f, &y_prime);
                    (losses, y_prime, 1.0)
                } else {
                    let losses = eval_losses.iter().map(|&l| -l).collect();
                    (losses, y_f.clone(), -1.0)
                };

            let weights = batch_weights(
                recipe.weighting.variant,
                recipe.weighting.tau,
                &eval_losses,
                &global,
                static_table,
            )?;
            epoch_weights.extend_from_slice(&weights);

            gs.zero();
            let coeff: Vec<f64> = weights.iter().map(|&w| grad_sign * w).collect();
            let dlogits_f = ce_grad(&logits_f, &grad_labels, &coeff);
            model.backward(&mut gs, &ctx_f, &dlogits_f);

            let retain_losses: Vec<f64> = if recipe.method.uses_retain() {
                let (x_r, y_r) = retain_view.gather(rb);
                let (logits_r, ctx_r) = model.forward(&x_r);
                let r_losses = ce_from_logits(&logits_r, &y_r);
                let r_coeff = vec![recipe.alpha / r_losses.len() as f64; r_losses.len()];
                let dlogits_r = ce_grad(&logits_r, &y_r, &r_coeff);
                model.backward(&mut gs, &ctx_r, &dlogits_r);
                r_losses
            } else {
                Vec::new()
            };

            let objective =
                combined_objective(&forget_losses, &weights, &retain_losses, recipe.alpha)?;
            if !objective.is_finite() {
                return Err(CoreError::UnlearnDiverged {
                    epoch,
                    partial: trajectory,
                });
            }

            forget_loss_sum += forget_losses.iter().sum::<f64>();
            forget_count += forget_losses.len();
            retain_loss_sum += retain_losses.iter().sum::<f64>();
            retain_count += retain_losses.len();

            opt.step(&mut model.params, &gs, mask.as_ref());
        }

        let ua = classifier_forget_accuracy(&model, &forget_view, recipe.batch_size);
        trajectory.push(EpochRecord {
            epoch,
            ua: Some(ua),
            forget_loss_mean: forget_loss_sum / forget_count.max(1) as f64,
            retain_loss_mean: (retain_count > 0)
                .then(|| retain_loss_sum / retain_count as f64),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        weight_snapshots.push(weight_summary(epoch, epoch_weights));
    }

    let unlearned = ClassifierCheckpoint {
        model,
        architecture_id: model_o.architecture_id.clone(),
        train_config_digest: recipe.digest(),
        rng_seed: recipe.seed,
    };
    let run = UnlearnRun {
        recipe_digest: recipe.digest(),
        start_checkpoint: start_digest,
        final_checkpoint: unlearned.params_digest(),
        trajectory,
        weight_snapshots,
    };
    Ok((unlearned, run))
}

fn classifier_forget_accuracy(
    model: &crate::models::ClassifierModel,
    view: &DatasetView<'_>,
    batch: usize,
) -> f64 {
    let mut correct = 0usize;
    let positions: Vec<usize> = (0..view.len()).collect();
    for chunk in positions.chunks(batch.max(1)) {
        let (x, y) = view.gather(chunk);
        let preds = argmax_rows(&model.logits(&x));
        correct += preds.iter().zip(y.iter()).filter(|(p, t)| p == t).count();
    }
    correct as f64 / view.len() as f64 * 100.0
}

// ---------------------------------------------------------------------------
// Diffusion unlearning
// ---------------------------------------------------------------------------

pub fn run_unlearning_diffusion(
    model_o: &DiffusionCheckpoint,
    dataset: &Dataset,
    split: &SplitSpec,
    recipe: &UnlearnRecipe,
    static_table: Option<&WeightTable>,
    reference_table: Option<&TimestepLossTable>,
) -> Result<(DiffusionCheckpoint, UnlearnRun)> {
    recipe.validate()?;
    if recipe.task != TaskKind::Diffusion {
        return Err(CoreError::InvalidTask(
            "diffusion engine invoked with a classifier recipe".into(),
        ));
    }
    if recipe.weighting.variant == WeightVariant::Static && static_table.is_none() {
        return Err(CoreError::MissingTable(
            "static weighting requires a prebuilt weight table".into(),
        ));
    }
    if recipe.weighting.variant == WeightVariant::Dynamic && reference_table.is_none() {
        return Err(CoreError::MissingTable(
            "dynamic diffusion weighting requires a timestep reference table".into(),
        ));
    }
    split.validate(dataset)?;

    let forget_view = dataset.view(split.forget.clone());
    let retain_view = dataset.view(split.retain.clone());
    let start_digest = model_o.params_digest();
    let num_classes = dataset.num_classes;
    let (c, h, w) = model_o.model.in_shape;

    let mut model = model_o.model.clone();
    let mask: Option<ParamMask> = if recipe.method.uses_mask() {
        Some(
            build_saliency_mask_diffusion(
                &model_o.model,
                &forget_view,
                recipe.mask_fraction,
                derive_seed(recipe.seed, "saliency"),
            )?
            .mask,
        )
    } else {
        None
    };
    let sampler = reference_table.map(TimestepSampler::new);

    let mut opt = make_optimizer(recipe);
    let mut gs = GradSet::zeros_like(&model.params);
    let mut trajectory = Vec::new();
    let mut weight_snapshots = Vec::new();
    let start = Instant::now();
    let label_root = derive_seed(recipe.seed, "dm-labels");
    let draw_root = derive_seed(recipe.seed, "dm-draws");
    use rand::Rng as _;

    for epoch in 0..recipe.epochs {
        let pairs = pair_batches(
            forget_view.len(),
            Some(retain_view.len()),
            recipe.batch_size,
            recipe.seed,
            epoch,
        )?;
        // wrong class fixed per forgetting example per epoch
        let all_labels: Vec<usize> = forget_view
            .indices
            .iter()
            .map(|&gi| dataset.labels[gi] as usize)
            .collect();
        let mut label_rng = rng_from_seed(derive_seed_n(label_root, &[epoch as u64]));
        let epoch_y_prime = draw_wrong_labels(&all_labels, num_classes, &mut label_rng)?;

        let mut forget_loss_sum = 0.0;
        let mut forget_count = 0usize;
        let mut retain_loss_sum = 0.0;
        let mut retain_count = 0usize;
        let mut epoch_weights = Vec::new();

        for (step, (fb, rb)) in pairs.forget.iter().zip(pairs.retain.iter()).enumerate() {
            let mut rng = rng_from_seed(derive_seed_n(draw_root, &[epoch as u64, step as u64]));
            let (x_f, y_f) = forget_view.gather(fb);
            let global = forget_view.global_indices(fb);
            let n_f = fb.len();
            let y_prime: Vec<usize> = fb.iter().map(|&p| epoch_y_prime[p]).collect();

            // one (t, eps) draw per forgetting example, shared between the
            // forgetting loss and the dynamic weight
            let ts: Vec<usize> = (0..n_f)
                .map(|_| match (&sampler, recipe.weighting.variant) {
                    (Some(s), WeightVariant::Dynamic) => s.sample(&mut rng),
                    _ => rng.gen_range(1..=model.t_max()),
                })
                .collect();
            let mut noise = Image::zeros((n_f, c, h, w));
            sample_standard_normal(&mut rng, noise.as_slice_mut().unwrap());

            let x0 = to_model_range(&x_f);
            let x_t = forward_noising(&model.schedule, &x0, &ts, &noise);
            let target = model.predict(&x_t, &ts, &y_prime); // detached y' branch
            let (pred_y, ctx_f) = model.predict_with_ctx(&x_t, &ts, &y_f);
            let forget_losses = per_example_sq_l2(&target, &pred_y);

            // evaluation loss reuses pred_y: ||eps - eps_theta(x_t|y)||^2,
            // rescaled by the reference mean at the drawn timestep
            let eval_losses: Vec<f64> = match recipe.weighting.variant {
                WeightVariant::Dynamic => {
                    let table = reference_table.unwrap();
                    per_example_sq_l2(&noise, &pred_y)
                        .into_iter()
                        .zip(ts.iter())
                        .map(|(l, &t)| rescale_loss(table, l, t))
                        .collect()
                }
                _ => vec![0.0; n_f],
            };
            let weights = batch_weights(
                recipe.weighting.variant,
                recipe.weighting.tau,
                &eval_losses,
                &global,
                static_table,
            )?;
            epoch_weights.extend_from_slice(&weights);

            gs.zero();
            // d/dpred_y of sum_i w_i ||target_i - pred_i||^2 = 2 w_i (pred - target)
            let mut dpred = &pred_y - &target;
            for (i, &wt) in weights.iter().enumerate() {
                let mut row = dpred.index_axis_mut(Axis(0), i);
                row.mapv_inplace(|v| v * (2.0 * wt) as f32);
            }
            model.unet.backward(&model.params, &mut gs, &ctx_f, &dpred);

            // retaining term on D_r with its own uniform (t, eps) draws
            let (x_r, y_r) = retain_view.gather(rb);
            let n_r = rb.len();
            let ts_r: Vec<usize> = (0..n_r).map(|_| rng.gen_range(1..=model.t_max())).collect();
            let mut noise_r = Image::zeros((n_r, c, h, w));
            sample_standard_normal(&mut rng, noise_r.as_slice_mut().unwrap());
            let x0_r = to_model_range(&x_r);
            let xt_r = forward_noising(&model.schedule, &x0_r, &ts_r, &noise_r);
            let (pred_r, ctx_r) = model.predict_with_ctx(&xt_r, &ts_r, &y_r);
            let retain_losses = per_example_sq_l2(&noise_r, &pred_r);
            let scale_r = (2.0 * recipe.alpha / n_r as f64) as f32;
            let mut dpred_r = &pred_r - &noise_r;
            dpred_r.mapv_inplace(|v| v * scale_r);
            model.unet.backward(&model.params, &mut gs, &ctx_r, &dpred_r);

            let objective =
                combined_objective(&forget_losses, &weights, &retain_losses, recipe.alpha)?;
            if !objective.is_finite() {
                return Err(CoreError::UnlearnDiverged {
                    epoch,
                    partial: trajectory,
                });
            }

            forget_loss_sum += forget_losses.iter().sum::<f64>();
            forget_count += n_f;
            retain_loss_sum += retain_losses.iter().sum::<f64>();
            retain_count += n_r;

            opt.step(&mut model.params, &gs, mask.as_ref());
        }

        trajectory.push(EpochRecord {
            epoch,
            ua: None,
            forget_loss_mean: forget_loss_sum / forget_count.max(1) as f64,
            retain_loss_mean: Some(retain_loss_sum / retain_count.max(1) as f64),
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        weight_snapshots.push(weight_summary(epoch, epoch_weights));
    }

    let unlearned = DiffusionCheckpoint {
        model,
        train_config_digest: recipe.digest(),
        rng_seed: recipe.seed,
    };
    let run = UnlearnRun {
        recipe_digest: recipe.digest(),
        start_checkpoint: start_digest,
        final_checkpoint: unlearned.params_digest(),
        trajectory,
        weight_snapshots,
    };
    Ok((unlearned, run))
}
