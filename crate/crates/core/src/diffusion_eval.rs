//! Diffusion loss evaluation: per-timestep reference tables, the uniform
//! static average, importance sampling over timesteps, and the rescaled
//! dynamic loss estimate.
//!
//! The reference table stores m(t), the forgetting-set mean of the original
//! model's epsilon loss at each timestep. Dynamic evaluation divides the
//! current loss by m(t) so values at different timesteps become comparable,
//! and timesteps are drawn proportionally to 1/m(t).

use crate::curvefit::fit_exponential;
use crate::dataset::DatasetView;
use crate::error::{CoreError, Result};
use crate::models::diffusion::diffusion_noise_loss;
use crate::models::DiffusionModel;
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use std::path::Path;
use unlearn_nn::layers::Image;
use unlearn_nn::rng::{derive_seed, derive_seed_n, rng_from_seed, sample_standard_normal, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableSource {
    /// Every (example, timestep) pair was evaluated.
    Exhaustive,
    /// Entries come from an exponential curve fitted to sampled means.
    Fitted,
    /// Fit did not converge; entries are piecewise-linear interpolation of
    /// the sampled means.
    FittedFallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimestepLossTable {
    pub t_max: usize,
    /// m(t) for t = 1..=t_max, each > 0.
    pub mean_loss: Vec<f64>,
    pub source: TableSource,
    pub fit_params: Option<(f64, f64, f64)>,
    /// (num_examples, num_timesteps) when sampled.
    pub sample_plan: Option<(usize, usize)>,
    pub model_digest: String,
    pub noise_seed: u64,
}

impl TimestepLossTable {
    /// Positive floor guarding the division in the rescaled estimate.
    pub const FLOOR: f64 = 1e-8;

    pub fn mean(&self, t: usize) -> f64 {
        self.mean_loss[t - 1].max(Self::FLOOR)
    }

    /// Draw one timestep with probability proportional to 1/m(t).
    pub fn sample_timestep(&self, rng: &mut Rng) -> usize {
        TimestepSampler::new(self).sample(rng)
    }

    /// CSV of (t, mean_loss) plus a JSON header.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(stem.with_extension("csv"))?;
        w.write_record(["t", "mean_loss"])?;
        for (i, &m) in self.mean_loss.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{m:.17e}")])?;
        }
        w.flush()?;
        let header = serde_json::json!({
            "t_max": self.t_max,
            "source": self.source,
            "fit_params": self.fit_params,
            "sample_plan": self.sample_plan,
            "model_digest": self.model_digest,
            "seed": self.noise_seed,
        });
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&header)?,
        )?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<TimestepLossTable> {
        let header: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let t_max = header["t_max"].as_u64().unwrap_or(0) as usize;
        let source: TableSource = serde_json::from_value(header["source"].clone())?;
        let fit_params: Option<(f64, f64, f64)> =
            serde_json::from_value(header["fit_params"].clone()).unwrap_or(None);
        let sample_plan: Option<(usize, usize)> =
            serde_json::from_value(header["sample_plan"].clone()).unwrap_or(None);
        let model_digest = header["model_digest"].as_str().unwrap_or("").to_string();
        let noise_seed = header["seed"].as_u64().unwrap_or(0);
        let mut rdr = csv::Reader::from_path(stem.with_extension("csv"))?;
        let mut mean_loss = vec![0.0f64; t_max];
        for rec in rdr.records() {
            let rec = rec?;
            let t: usize = rec[0].parse().map_err(|_| CoreError::Malformed {
                path: stem.display().to_string(),
                reason: format!("bad t {}", &rec[0]),
            })?;
            mean_loss[t - 1] = rec[1].parse().unwrap_or(f64::NAN);
        }
        Ok(TimestepLossTable {
            t_max,
            mean_loss,
            source,
            fit_params,
            sample_plan,
            model_digest,
            noise_seed,
        })
    }
}

/// Deterministic standard-normal noise for an (example, timestep) pair.
pub fn noise_for(shape: (usize, usize, usize), seed: u64, example: usize, t: usize) -> Image {
    let (c, h, w) = shape;
    let mut rng = rng_from_seed(derive_seed_n(seed, &[example as u64, t as u64]));
    let mut out = Image::zeros((1, c, h, w));
    sample_standard_normal(&mut rng, out.as_slice_mut().unwrap());
    out
}

/// Per-timestep mean epsilon loss of `model_o` over the whole forgetting
/// view: N*T model evaluations, one seeded noise draw per pair.
pub fn build_reference_table_exhaustive(
    model_o: &DiffusionModel,
    forget_view: &DatasetView<'_>,
    noise_seed: u64,
) -> Result<TimestepLossTable> {
    let t_max = model_o.t_max();
    let means = sampled_means(
        model_o,
        forget_view,
        &(0..forget_view.len()).collect::<Vec<_>>(),
        &(1..=t_max).collect::<Vec<_>>(),
        noise_seed,
    )?;
    for (i, &m) in means.iter().enumerate() {
        if !(m > 0.0) {
            return Err(CoreError::DegenerateTable(i + 1));
        }
    }
    Ok(TimestepLossTable {
        t_max,
        mean_loss: means,
        source: TableSource::Exhaustive,
        fit_params: None,
        sample_plan: None,
        model_digest: unlearn_nn::checkpoint::digest(&model_o.params),
        noise_seed,
    })
}

/// Mean loss over the given view positions at each timestep in `ts`.
/// Noise is keyed by (noise_seed, global example index, t) so exhaustive
/// and sampled builds evaluate identical points.
fn sampled_means(
    model: &DiffusionModel,
    view: &DatasetView<'_>,
    positions: &[usize],
    ts: &[usize],
    noise_seed: u64,
) -> Result<Vec<f64>> {
    let (c, h, w) = model.in_shape;
    let mut means = Vec::with_capacity(ts.len());
    let chunk = 64usize;
    for &t in ts {
        let mut acc = 0.0f64;
        for pos_chunk in positions.chunks(chunk) {
            let (x, y) = view.gather(pos_chunk);
            let n = pos_chunk.len();
            let mut noise = Image::zeros((n, c, h, w));
            for (row, &p) in pos_chunk.iter().enumerate() {
                let gi = view.indices[p];
                let nz = noise_for((c, h, w), noise_seed, gi, t);
                noise
                    .index_axis_mut(Axis(0), row)
                    .assign(&nz.index_axis(Axis(0), 0));
            }
            let tvec = vec![t; n];
            let losses = diffusion_noise_loss(model, &x, &y, &tvec, &noise)?;
            acc += losses.iter().sum::<f64>();
        }
        means.push(acc / positions.len() as f64);
    }
    Ok(means)
}

/// Build the reference table from a sampled subset of examples and
/// timesteps, completing the curve with an exponential least-squares fit.
///
/// With `num_examples == N` and `num_timesteps == T` the sampled means are
/// exact and are used directly (no fit), reproducing the exhaustive table.
pub fn fit_reference_table(
    model_o: &DiffusionModel,
    forget_view: &DatasetView<'_>,
    num_examples: usize,
    num_timesteps: usize,
    seed: u64,
) -> Result<TimestepLossTable> {
    let n = forget_view.len();
    let t_max = model_o.t_max();
    if num_examples == 0 || num_examples > n {
        return Err(CoreError::InvalidArgument(format!(
            "num_examples {num_examples} outside [1, {n}]"
        )));
    }
    if num_timesteps == 0 || num_timesteps > t_max {
        return Err(CoreError::InvalidArgument(format!(
            "num_timesteps {num_timesteps} outside [1, {t_max}]"
        )));
    }

    let positions: Vec<usize> = if num_examples == n {
        (0..n).collect()
    } else {
        let mut rng = rng_from_seed(derive_seed(seed, "table-subset"));
        let mut s = rand::seq::index::sample(&mut rng, n, num_examples).into_vec();
        s.sort_unstable();
        s
    };
    let ts: Vec<usize> = timestep_grid(t_max, num_timesteps);
    let means = sampled_means(model_o, forget_view, &positions, &ts, seed)?;
    for (i, &m) in means.iter().enumerate() {
        if !(m > 0.0) {
            return Err(CoreError::DegenerateTable(ts[i]));
        }
    }

    if num_examples == n && num_timesteps == t_max {
        return Ok(TimestepLossTable {
            t_max,
            mean_loss: means,
            source: TableSource::Exhaustive,
            fit_params: None,
            sample_plan: Some((num_examples, num_timesteps)),
            model_digest: unlearn_nn::checkpoint::digest(&model_o.params),
            noise_seed: seed,
        });
    }

    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let fit = fit_exponential(&tf, &means).filter(|f| f.converged && f.sse.is_finite());
    let (mean_loss, source, fit_params) = match fit {
        Some(f) => {
            let curve: Vec<f64> = (1..=t_max)
                .map(|t| f.eval(t as f64).max(TimestepLossTable::FLOOR))
                .collect();
            (curve, TableSource::Fitted, Some((f.a, f.b, f.c)))
        }
        None => {
            let interp = piecewise_linear(&ts, &means, t_max);
            (interp, TableSource::FittedFallback, None)
        }
    };

    Ok(TimestepLossTable {
        t_max,
        mean_loss,
        source,
        fit_params,
        sample_plan: Some((num_examples, num_timesteps)),
        model_digest: unlearn_nn::checkpoint::digest(&model_o.params),
        noise_seed: seed,
    })
}

/// Evenly spaced timesteps covering [1, t_max].
pub fn timestep_grid(t_max: usize, count: usize) -> Vec<usize> {
    if count >= t_max {
        return (1..=t_max).collect();
    }
    if count == 1 {
        return vec![t_max.div_ceil(2)];
    }
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let t = 1.0 + (t_max - 1) as f64 * j as f64 / (count - 1) as f64;
        let t = t.round() as usize;
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out
}

fn piecewise_linear(ts: &[usize], ys: &[f64], t_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let tf = t as f64;
        let v = if tf <= ts[0] as f64 {
            ys[0]
        } else if tf >= *ts.last().unwrap() as f64 {
            *ys.last().unwrap()
        } else {
            let k = ts.partition_point(|&s| (s as f64) < tf);
            let (t0, t1) = (ts[k - 1] as f64, ts[k] as f64);
            let w = (tf - t0) / (t1 - t0);
            ys[k - 1] * (1.0 - w) + ys[k] * w
        };
        out.push(v.max(TimestepLossTable::FLOOR));
    }
    out
}

/// Precomputed inverse-loss categorical sampler over timesteps.
pub struct TimestepSampler {
    cdf: Vec<f64>,
}

impl TimestepSampler {
    pub fn new(table: &TimestepLossTable) -> Self {
        let mut cdf = Vec::with_capacity(table.t_max);
        let mut acc = 0.0f64;
        for t in 1..=table.t_max {
            acc += 1.0 / table.mean(t);
            cdf.push(acc);
        }
        let total = acc;
        for v in cdf.iter_mut() {
            *v /= total;
        }
        Self { cdf }
    }

    /// Probability of drawing timestep t.
    pub fn prob(&self, t: usize) -> f64 {
        let lo = if t >= 2 { self.cdf[t - 2] } else { 0.0 };
        self.cdf[t - 1] - lo
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        use rand::Rng as _;
        let u: f64 = rng.gen_range(0.0..1.0);
        // first index with cdf >= u
        let k = self.cdf.partition_point(|&c| c < u);
        k.min(self.cdf.len() - 1) + 1
    }
}

/// Rescale a per-example loss by the reference mean at its timestep.
pub fn rescale_loss(table: &TimestepLossTable, loss: f64, t: usize) -> f64 {
    loss / table.mean(t)
}

/// Rescaled evaluation loss for one example: l(model; x, y, t) / m(t).
/// The caller supplies the noise so the same (t, eps) draw can be shared
/// with the training loss of that example.
pub fn estimated_eval_loss(
    model: &DiffusionModel,
    x: &Image,
    y: usize,
    t: usize,
    noise: &Image,
    table: &TimestepLossTable,
) -> Result<f64> {
    let losses = diffusion_noise_loss(model, x, &[y], &[t], noise)?;
    Ok(rescale_loss(table, losses[0], t))
}

/// Uniform average of the epsilon loss over a timestep grid (the full
/// [1, T] range unless a subsample grid is given).
pub fn static_eval_loss(
    model_o: &DiffusionModel,
    x: &Image,
    y: usize,
    example_index: usize,
    noise_seed: u64,
    grid: Option<&[usize]>,
) -> Result<f64> {
    let t_max = model_o.t_max();
    let full: Vec<usize>;
    let ts: &[usize] = match grid {
        Some(g) => g,
        None => {
            full = (1..=t_max).collect();
            &full
        }
    };
    if ts.is_empty() {
        return Err(CoreError::InvalidArgument("empty timestep grid".into()));
    }
    let (c, h, w) = model_o.in_shape;
    let mut acc = 0.0f64;
    // batch timesteps against replicated x
    for chunk in ts.chunks(64) {
        let n = chunk.len();
        let mut xs = Image::zeros((n, c, h, w));
        let mut noise = Image::zeros((n, c, h, w));
        for (row, &t) in chunk.iter().enumerate() {
            xs.index_axis_mut(Axis(0), row)
                .assign(&x.index_axis(Axis(0), 0));
            let nz = noise_for((c, h, w), noise_seed, example_index, t);
            noise
                .index_axis_mut(Axis(0), row)
                .assign(&nz.index_axis(Axis(0), 0));
        }
        let ys = vec![y; n];
        let losses = diffusion_noise_loss(model_o, &xs, &ys, chunk, &noise)?;
        acc += losses.iter().sum::<f64>();
    }
    Ok(acc / ts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_shapes10;
    use crate::models::{DiffusionModel, UnetConfig};

    fn tiny_model(t_max: usize) -> DiffusionModel {
        let mut rng = rng_from_seed(0);
        DiffusionModel::new(
            UnetConfig {
                in_c: 1,
                hw: 8,
                base: 4,
                emb_dim: 8,
                num_classes: 10,
            },
            t_max,
            &mut rng,
        )
    }

    fn table_from(means: Vec<f64>) -> TimestepLossTable {
        TimestepLossTable {
            t_max: means.len(),
            mean_loss: means,
            source: TableSource::Exhaustive,
            fit_params: None,
            sample_plan: None,
            model_digest: String::new(),
            noise_seed: 0,
        }
    }

    #[test]
    fn exhaustive_matches_hand_loop() {
        let d = synthetic_shapes10(2, 0, 8, 1);
        let model = tiny_model(3);
        let view = d.train_view();
        let table = build_reference_table_exhaustive(&model, &view, 7).unwrap();
        // six-evaluation hand loop
        for t in 1..=3usize {
            let mut acc = 0.0;
            for pos in 0..2usize {
                let (x, y) = view.gather(&[pos]);
                let gi = view.indices[pos];
                let nz = noise_for(model.in_shape, 7, gi, t);
                let l = diffusion_noise_loss(&model, &x, &[y[0]], &[t], &nz).unwrap();
                acc += l[0];
            }
            assert!((table.mean_loss[t - 1] - acc / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn exhaustive_seed_sensitivity() {
        let d = synthetic_shapes10(3, 0, 8, 2);
        let model = tiny_model(4);
        let view = d.train_view();
        let a = build_reference_table_exhaustive(&model, &view, 1).unwrap();
        let b = build_reference_table_exhaustive(&model, &view, 1).unwrap();
        let c = build_reference_table_exhaustive(&model, &view, 2).unwrap();
        assert_eq!(a.mean_loss, b.mean_loss);
        assert_ne!(a.mean_loss, c.mean_loss);
    }

    #[test]
    fn fitted_degenerate_config_equals_exhaustive() {
        let d = synthetic_shapes10(4, 0, 8, 3);
        let model = tiny_model(5);
        let view = d.train_view();
        let ex = build_reference_table_exhaustive(&model, &view, 11).unwrap();
        let fit = fit_reference_table(&model, &view, 4, 5, 11).unwrap();
        assert_eq!(fit.source, TableSource::Exhaustive);
        assert_eq!(fit.mean_loss, ex.mean_loss);
    }

    #[test]
    fn sample_plan_evaluation_count() {
        // the sampled build touches exactly num_examples * num_timesteps pairs
        let grid = timestep_grid(1000, 10);
        assert_eq!(grid.len(), 10);
        assert_eq!(grid[0], 1);
        assert_eq!(*grid.last().unwrap(), 1000);
        // 50 examples x 10 timesteps = 500 evaluations
        assert_eq!(50 * grid.len(), 500);
    }

    #[test]
    fn importance_sampler_probabilities() {
        let table = table_from(vec![1.0, 3.0]);
        let s = TimestepSampler::new(&table);
        assert!((s.prob(1) - 0.75).abs() < 1e-12);
        assert!((s.prob(2) - 0.25).abs() < 1e-12);
        // constant m(t) -> uniform
        let table = table_from(vec![2.0; 5]);
        let s = TimestepSampler::new(&table);
        for t in 1..=5 {
            assert!((s.prob(t) - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_sampler_frequencies_match() {
        let table = table_from(vec![0.5, 1.0, 2.0, 4.0]);
        let s = TimestepSampler::new(&table);
        let mut rng = rng_from_seed(5);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            counts[s.sample(&mut rng) - 1] += 1;
        }
        let mut chi2 = 0.0;
        for t in 1..=4 {
            let e = s.prob(t) * n as f64;
            chi2 += (counts[t - 1] as f64 - e).powi(2) / e;
        }
        // 3 dof, p=0.01 critical value 11.34
        assert!(chi2 < 11.34, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn rescale_is_exact_for_tracking_losses() {
        let table = table_from(vec![0.4, 0.9, 2.5, 7.0]);
        for t in 1..=4 {
            let m = table.mean(t);
            assert!((rescale_loss(&table, m, t) - 1.0).abs() < 1e-12);
            assert!((rescale_loss(&table, 2.0 * m, t) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn static_eval_loss_matches_loop_and_degenerates() {
        let d = synthetic_shapes10(2, 0, 8, 4);
        let model = tiny_model(10);
        let view = d.train_view();
        let (x, y) = view.gather(&[0]);
        let gi = view.indices[0];
        let full = static_eval_loss(&model, &x, y[0], gi, 21, None).unwrap();
        let mut acc = 0.0;
        for t in 1..=10usize {
            let nz = noise_for(model.in_shape, 21, gi, t);
            acc += diffusion_noise_loss(&model, &x, &[y[0]], &[t], &nz).unwrap()[0];
        }
        assert!((full - acc / 10.0).abs() < 1e-6);
        // full grid passed explicitly equals the default
        let grid: Vec<usize> = (1..=10).collect();
        let sub = static_eval_loss(&model, &x, y[0], gi, 21, Some(&grid)).unwrap();
        assert!((full - sub).abs() < 1e-12);
        // T=1 equals a single noise loss
        let m1 = tiny_model(1);
        let nz = noise_for(m1.in_shape, 21, gi, 1);
        let single = diffusion_noise_loss(&m1, &x, &[y[0]], &[1], &nz).unwrap()[0];
        let se = static_eval_loss(&m1, &x, y[0], gi, 21, None).unwrap();
        assert!((se - single).abs() < 1e-9);
    }
}
