//! Class-conditional DDPM: noise schedule, training, epsilon loss, and
//! ancestral sampling with classifier-free guidance.

use crate::dataset::DatasetView;
use crate::error::{CoreError, Result};
use crate::models::classifier::{TrainLog, TrainLogRow};
use crate::models::unet::{CondUnet, CondUnetCtx, UnetConfig};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use unlearn_nn::layers::Image;
use unlearn_nn::optim::Adam;
use unlearn_nn::params::{GradSet, ParamSet};
use unlearn_nn::rng::{derive_seed, derive_seed_n, rng_from_seed, sample_standard_normal};

/// Linear beta schedule with endpoints scaled by 1000/T, so the total
/// injected noise matches the reference 1000-step schedule at any T and
/// Var(x_T) approaches 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Respace the canonical 1000-step linear schedule (betas in
    /// [1e-4, 0.02]) to `t_max` steps by interpolating log(alpha_bar), so
    /// betas stay in (0,1) and the total injected noise is T-independent.
    pub fn scaled_linear(t_max: usize) -> Self {
        const REF_T: usize = 1000;
        let mut log_ab_ref = Vec::with_capacity(REF_T + 1);
        log_ab_ref.push(0.0f64);
        let mut acc = 0.0f64;
        for i in 0..REF_T {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / (REF_T - 1) as f64;
            acc += (1.0 - beta).ln();
            log_ab_ref.push(acc);
        }
        let interp = |pos: f64| -> f64 {
            let k = (pos.floor() as usize).min(REF_T - 1);
            let frac = pos - k as f64;
            log_ab_ref[k] * (1.0 - frac) + log_ab_ref[k + 1] * frac.min(1.0)
        };
        let mut betas = Vec::with_capacity(t_max);
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prev = 1.0f64;
        for j in 1..=t_max {
            let ab = interp(j as f64 * REF_T as f64 / t_max as f64).exp();
            betas.push(1.0 - ab / prev);
            alpha_bar.push(ab);
            prev = ab;
        }
        Self {
            t_max,
            betas,
            alpha_bar,
        }
    }

    /// sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t) for t in [1, T].
    pub fn noising_coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t - 1];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

#[derive(Clone)]
pub struct DiffusionModel {
    pub params: ParamSet,
    pub unet: CondUnet,
    pub schedule: NoiseSchedule,
    pub num_classes: usize,
    pub in_shape: (usize, usize, usize),
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("t_max", &self.schedule.t_max)
            .field("num_classes", &self.num_classes)
            .field("in_shape", &self.in_shape)
            .field("num_params", &self.params.num_scalars())
            .finish()
    }
}

impl DiffusionModel {
    pub fn new(cfg: UnetConfig, t_max: usize, rng: &mut unlearn_nn::rng::Rng) -> Self {
        let mut params = ParamSet::new();
        let unet = CondUnet::new(&mut params, rng, cfg);
        Self {
            params,
            unet,
            schedule: NoiseSchedule::scaled_linear(t_max),
            num_classes: cfg.num_classes,
            in_shape: (cfg.in_c, cfg.hw, cfg.hw),
        }
    }

    pub fn t_max(&self) -> usize {
        self.schedule.t_max
    }

    /// Reserved class id for the unconditional branch.
    pub fn null_token(&self) -> usize {
        self.num_classes
    }

    pub fn predict(&self, x_t: &Image, ts: &[usize], ys: &[usize]) -> Image {
        let tf: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
        self.unet.infer(&self.params, x_t, &tf, ys)
    }

    pub fn predict_with_ctx(&self, x_t: &Image, ts: &[usize], ys: &[usize]) -> (Image, CondUnetCtx) {
        let tf: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
        self.unet.forward(&self.params, x_t, &tf, ys)
    }
}

/// A trained diffusion model plus provenance.
#[derive(Debug)]
pub struct DiffusionCheckpoint {
    pub model: DiffusionModel,
    pub train_config_digest: String,
    pub rng_seed: u64,
}

impl DiffusionCheckpoint {
    pub fn params_digest(&self) -> String {
        unlearn_nn::checkpoint::digest(&self.model.params)
    }
}

/// Map dataset features in [0,1] to the model range [-1,1].
pub fn to_model_range(x: &Image) -> Image {
    x.mapv(|v| v * 2.0 - 1.0)
}

/// x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps, per-example t.
pub fn forward_noising(
    schedule: &NoiseSchedule,
    x0: &Image,
    ts: &[usize],
    noise: &Image,
) -> Image {
    let mut xt = Image::zeros(x0.raw_dim());
    for (i, &t) in ts.iter().enumerate() {
        let (a, b) = schedule.noising_coeffs(t);
        let x0i = x0.index_axis(Axis(0), i);
        let ni = noise.index_axis(Axis(0), i);
        let mut xo = xt.index_axis_mut(Axis(0), i);
        ndarray::Zip::from(&mut xo)
            .and(&x0i)
            .and(&ni)
            .for_each(|o, &x, &n| *o = (a as f32) * x + (b as f32) * n);
    }
    xt
}

/// Squared L2 distance per example between `noise` and the model's epsilon
/// prediction at the forward-noised x_t. Features are expected in [0,1].
pub fn diffusion_noise_loss(
    model: &DiffusionModel,
    x: &Image,
    ys: &[usize],
    ts: &[usize],
    noise: &Image,
) -> Result<Vec<f64>> {
    for &t in ts {
        if t < 1 || t > model.t_max() {
            return Err(CoreError::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                model.t_max()
            )));
        }
    }
    let x0 = to_model_range(x);
    let xt = forward_noising(&model.schedule, &x0, ts, noise);
    let pred = model.predict(&xt, ts, ys);
    Ok(per_example_sq_l2(noise, &pred))
}

/// Sum over feature dims of (a-b)^2, per example, in f64.
pub fn per_example_sq_l2(a: &Image, b: &Image) -> Vec<f64> {
    let n = a.dim().0;
    let mut out = vec![0.0f64; n];
    for i in 0..n {
        let ai = a.index_axis(Axis(0), i);
        let bi = b.index_axis(Axis(0), i);
        let mut acc = 0.0f64;
        ndarray::Zip::from(&ai).and(&bi).for_each(|&x, &y| {
            let d = (x as f64) - (y as f64);
            acc += d * d;
        });
        out[i] = acc;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub t_max: usize,
    pub base_channels: usize,
    pub emb_dim: usize,
    /// Probability of replacing the class token with the null token during
    /// training (classifier-free guidance).
    pub null_drop: f64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
            t_max: 200,
            base_channels: 16,
            emb_dim: 64,
            null_drop: 0.10,
        }
    }
}

impl DiffusionTrainConfig {
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Train the conditional DDPM with per-dim MSE and null-token dropout.
pub fn train_diffusion(
    view: &DatasetView<'_>,
    cfg: &DiffusionTrainConfig,
) -> Result<(DiffusionCheckpoint, TrainLog)> {
    if view.is_empty() {
        return Err(CoreError::InvalidArgument("training view is empty".into()));
    }
    let (c, h, w) = view.dataset.example_shape();
    assert_eq!(h, w, "square images only");
    let ucfg = UnetConfig {
        in_c: c,
        hw: h,
        base: cfg.base_channels,
        emb_dim: cfg.emb_dim,
        num_classes: view.dataset.num_classes,
    };
    let mut init_rng = rng_from_seed(derive_seed(cfg.seed, "diffusion-init"));
    let mut model = DiffusionModel::new(ucfg, cfg.t_max, &mut init_rng);
    let mut opt = Adam::new(cfg.lr as f32);
    let mut gs = GradSet::zeros_like(&model.params);
    let mut log = TrainLog::new();
    let start = Instant::now();
    let dims = (c * h * w) as f64;
    let step_root = derive_seed(cfg.seed, "diffusion-step");

    use rand::Rng as _;
    for step in 0..cfg.steps {
        let mut rng = rng_from_seed(derive_seed_n(step_root, &[step as u64]));
        let positions: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..view.len()))
            .collect();
        let (x, mut ys) = view.gather(&positions);
        for y in ys.iter_mut() {
            if rng.gen_range(0.0..1.0) < cfg.null_drop {
                *y = model.null_token();
            }
        }
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(1..=cfg.t_max))
            .collect();
        let mut noise = Image::zeros(x.raw_dim());
        sample_standard_normal(&mut rng, noise.as_slice_mut().unwrap());

        let x0 = to_model_range(&x);
        let xt = forward_noising(&model.schedule, &x0, &ts, &noise);
        let tf: Vec<f32> = ts.iter().map(|&t| t as f32).collect();
        let (pred, ctx) = model.unet.forward(&model.params, &xt, &tf, &ys);

        let nb = cfg.batch_size as f64;
        let sq = per_example_sq_l2(&noise, &pred);
        let loss: f64 = sq.iter().sum::<f64>() / (nb * dims);
        if !loss.is_finite() {
            return Err(CoreError::TrainingDiverged { epoch: step });
        }
        // d/dpred of mean((pred-eps)^2) = 2 (pred - eps) / (N*D)
        let scale = (2.0 / (nb * dims)) as f32;
        let mut dpred = &pred - &noise;
        dpred.mapv_inplace(|v| v * scale);
        gs.zero();
        model.unet.backward(&model.params, &mut gs, &ctx, &dpred);
        opt.step(&mut model.params, &gs, None);

        if step % 50 == 0 || step + 1 == cfg.steps {
            log.push(TrainLogRow {
                epoch: step,
                split: "train".into(),
                loss,
                accuracy: None,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
    }

    Ok((
        DiffusionCheckpoint {
            train_config_digest: cfg.digest(),
            rng_seed: cfg.seed,
            model,
        },
        log,
    ))
}

/// Ancestral DDPM sampling with classifier-free guidance
/// eps_hat = eps_uncond + s * (eps_cond - eps_uncond).
///
/// `class_id` may be the null token, in which case sampling is purely
/// unconditional. Returns images in [0,1], deterministic given the seed.
pub fn sample_diffusion(
    model: &DiffusionModel,
    class_id: usize,
    count: usize,
    guidance_scale: f64,
    seed: u64,
) -> Result<Image> {
    if class_id > model.null_token() {
        return Err(CoreError::InvalidArgument(format!(
            "class id {class_id} out of range"
        )));
    }
    if count == 0 {
        return Err(CoreError::InvalidArgument("count must be positive".into()));
    }
    let (c, h, w) = model.in_shape;
    let t_max = model.t_max();
    let mut rng = rng_from_seed(derive_seed(seed, "ddpm-sample"));
    let mut x = Image::zeros((count, c, h, w));
    sample_standard_normal(&mut rng, x.as_slice_mut().unwrap());

    let unconditional = class_id == model.null_token();
    let nulls = vec![model.null_token(); count];
    let conds = vec![class_id; count];

    let mut z = Image::zeros((count, c, h, w));
    for t in (1..=t_max).rev() {
        let ts = vec![t; count];
        let eps_hat = if unconditional || guidance_scale == 0.0 {
            model.predict(&x, &ts, &nulls)
        } else {
            // one batched forward over [cond; uncond]
            let mut both = Image::zeros((2 * count, c, h, w));
            both.slice_mut(ndarray::s![..count, .., .., ..]).assign(&x);
            both.slice_mut(ndarray::s![count.., .., .., ..]).assign(&x);
            let ts2 = vec![t; 2 * count];
            let mut ys2 = conds.clone();
            ys2.extend_from_slice(&nulls);
            let pred = model.predict(&both, &ts2, &ys2);
            let cond = pred.slice(ndarray::s![..count, .., .., ..]).to_owned();
            let uncond = pred.slice(ndarray::s![count.., .., .., ..]).to_owned();
            let s = guidance_scale as f32;
            let mut out = uncond.clone();
            ndarray::Zip::from(&mut out)
                .and(&cond)
                .and(&uncond)
                .for_each(|o, &cv, &uv| *o = uv + s * (cv - uv));
            out
        };

        let ab_t = model.schedule.alpha_bar[t - 1];
        let ab_prev = if t > 1 {
            model.schedule.alpha_bar[t - 2]
        } else {
            1.0
        };
        let beta_t = model.schedule.betas[t - 1];
        let alpha_t = 1.0 - beta_t;
        // predicted x0, clipped to the model range
        let inv_sq_ab = 1.0 / ab_t.sqrt();
        let coef_eps = (1.0 - ab_t).sqrt();
        let mut x0 = Image::zeros((count, c, h, w));
        ndarray::Zip::from(&mut x0)
            .and(&x)
            .and(&eps_hat)
            .for_each(|o, &xv, &ev| {
                *o = (((xv as f64) - coef_eps * (ev as f64)) * inv_sq_ab).clamp(-1.0, 1.0) as f32
            });
        if t > 1 {
            let c_x0 = ab_prev.sqrt() * beta_t / (1.0 - ab_t);
            let c_xt = alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let sigma = ((1.0 - ab_prev) / (1.0 - ab_t) * beta_t).sqrt();
            sample_standard_normal(&mut rng, z.as_slice_mut().unwrap());
            ndarray::Zip::from(&mut x)
                .and(&x0)
                .and(&z)
                .for_each(|xv, &x0v, &zv| {
                    *xv = (c_x0 * (x0v as f64)
                        + c_xt * (*xv as f64)
                        + sigma * (zv as f64)) as f32
                });
        } else {
            x = x0;
        }
    }
    // back to [0,1]
    Ok(x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_shapes10;

    fn tiny_model(seed: u64) -> DiffusionModel {
        let mut rng = rng_from_seed(seed);
        DiffusionModel::new(
            UnetConfig {
                in_c: 1,
                hw: 8,
                base: 4,
                emb_dim: 8,
                num_classes: 3,
            },
            10,
            &mut rng,
        )
    }

    #[test]
    fn schedule_total_noise_is_t_independent() {
        for t_max in [50usize, 200, 1000] {
            let s = NoiseSchedule::scaled_linear(t_max);
            let final_ab = s.alpha_bar[t_max - 1];
            assert!(
                final_ab < 0.01,
                "alpha_bar_T {final_ab} too large at T={t_max}"
            );
            assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
            // monotone decreasing alpha_bar
            for i in 1..t_max {
                assert!(s.alpha_bar[i] < s.alpha_bar[i - 1]);
            }
        }
    }

    #[test]
    fn forward_noising_variance_approaches_one() {
        // empirical Var(x_T) over noise draws for a fixed x0, 10k samples
        let s = NoiseSchedule::scaled_linear(200);
        let mut rng = rng_from_seed(3);
        let x0 = Image::from_elem((1, 1, 4, 4), 0.3);
        let n_draws = 10_000 / 16;
        let mut vals = Vec::new();
        let mut noise = Image::zeros((1, 1, 4, 4));
        for _ in 0..n_draws {
            sample_standard_normal(&mut rng, noise.as_slice_mut().unwrap());
            let xt = forward_noising(&s, &x0, &[200], &noise);
            vals.extend(xt.iter().map(|&v| v as f64));
        }
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "Var(x_T) = {var}");
    }

    #[test]
    fn noise_loss_zero_prediction_equals_norm() {
        // an untrained model won't return zeros, so check the identity
        // directly against a manual forward-noising + prediction
        let model = tiny_model(1);
        let x = Image::from_elem((2, 1, 8, 8), 0.4);
        let ys = [0usize, 2];
        let ts = [3usize, 9];
        let mut noise = Image::zeros((2, 1, 8, 8));
        let mut rng = rng_from_seed(5);
        sample_standard_normal(&mut rng, noise.as_slice_mut().unwrap());
        let losses = diffusion_noise_loss(&model, &x, &ys, &ts, &noise).unwrap();

        // closed-form oracle: build x_t by hand, call the network, sum squares
        let x0 = to_model_range(&x);
        for i in 0..2 {
            let (a, b) = model.schedule.noising_coeffs(ts[i]);
            let mut xt = Image::zeros((1, 1, 8, 8));
            ndarray::Zip::from(&mut xt.index_axis_mut(Axis(0), 0))
                .and(&x0.index_axis(Axis(0), i))
                .and(&noise.index_axis(Axis(0), i))
                .for_each(|o, &xv, &nv| *o = (a as f32) * xv + (b as f32) * nv);
            let pred = model.predict(&xt, &[ts[i]], &[ys[i]]);
            let mut oracle = 0.0f64;
            ndarray::Zip::from(&noise.index_axis(Axis(0), i))
                .and(&pred.index_axis(Axis(0), 0))
                .for_each(|&nv, &pv| {
                    oracle += ((nv as f64) - (pv as f64)).powi(2);
                });
            assert!(
                (losses[i] - oracle).abs() < 1e-6,
                "example {i}: {} vs {oracle}",
                losses[i]
            );
        }
    }

    #[test]
    fn noise_loss_rejects_bad_timestep() {
        let model = tiny_model(2);
        let x = Image::from_elem((1, 1, 8, 8), 0.4);
        let noise = Image::zeros((1, 1, 8, 8));
        assert!(diffusion_noise_loss(&model, &x, &[0], &[0], &noise).is_err());
        assert!(diffusion_noise_loss(&model, &x, &[0], &[11], &noise).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_in_range() {
        let model = tiny_model(4);
        let a = sample_diffusion(&model, 1, 2, 2.0, 42).unwrap();
        let b = sample_diffusion(&model, 1, 2, 2.0, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = sample_diffusion(&model, 1, 2, 2.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_guidance_equals_null_token_sampling() {
        let model = tiny_model(6);
        let cond = sample_diffusion(&model, 2, 2, 0.0, 9).unwrap();
        let uncond = sample_diffusion(&model, model.null_token(), 2, 1.5, 9).unwrap();
        assert_eq!(cond, uncond);
    }

    #[test]
    fn sampling_rejects_zero_count_and_bad_class() {
        let model = tiny_model(7);
        assert!(sample_diffusion(&model, 0, 0, 1.0, 0).is_err());
        assert!(sample_diffusion(&model, 5, 1, 1.0, 0).is_err());
    }

    #[test]
    fn train_diffusion_smoke_and_determinism() {
        let d = synthetic_shapes10(32, 0, 8, 8);
        let cfg = DiffusionTrainConfig {
            steps: 5,
            batch_size: 8,
            lr: 1e-3,
            seed: 2,
            t_max: 10,
            base_channels: 4,
            emb_dim: 8,
            null_drop: 0.1,
        };
        let (a, log) = train_diffusion(&d.train_view(), &cfg).unwrap();
        let (b, _) = train_diffusion(&d.train_view(), &cfg).unwrap();
        assert_eq!(a.model.params.flatten(), b.model.params.flatten());
        assert!(!log.is_empty());
        assert!(log.iter().all(|r| r.loss.is_finite()));
    }
}
