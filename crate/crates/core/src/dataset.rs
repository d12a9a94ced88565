//! Datasets: in-memory image collections with a train/test pool boundary.
//!
//! A `Dataset` holds every example of a benchmark in one tensor, training
//! pool first. Example indices are global and stable: `0..train_count` is
//! the training pool, `train_count..len` is the held-out test pool. Split
//! construction partitions the training pool by these indices.
//!
//! Loaders cover the standard CIFAR-10 binary batches, a documented
//! raw-array directory format, and two seeded synthetic generators used at
//! desk scale.

use crate::error::{CoreError, Result};
use ndarray::{Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use unlearn_nn::rng::{derive_seed, rng_from_seed, sample_standard_normal};

/// One indexed example: stable id, image features in [0,1], class label.
pub struct LabeledExample<'a> {
    pub index: usize,
    pub features: ArrayView3<'a, f32>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// All examples, training pool first, values in [0,1], NCHW.
    pub features: Array4<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub train_count: usize,
    pub digest: String,
}

impl Dataset {
    pub fn new(
        name: &str,
        features: Array4<f32>,
        labels: Vec<u8>,
        num_classes: usize,
        train_count: usize,
    ) -> Self {
        assert_eq!(features.dim().0, labels.len(), "feature/label count");
        assert!(train_count <= labels.len());
        assert!(
            labels.iter().all(|&l| (l as usize) < num_classes),
            "label out of range"
        );
        let digest = dataset_digest(&features, &labels, num_classes, train_count);
        Self {
            name: name.to_string(),
            features,
            labels,
            num_classes,
            train_count,
            digest,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of a single example.
    pub fn example_shape(&self) -> (usize, usize, usize) {
        let (_, c, h, w) = self.features.dim();
        (c, h, w)
    }

    pub fn example(&self, index: usize) -> LabeledExample<'_> {
        LabeledExample {
            index,
            features: self.features.index_axis(Axis(0), index),
            label: self.labels[index] as usize,
        }
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.train_count).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (self.train_count..self.len()).collect()
    }

    pub fn view(&self, indices: Vec<usize>) -> DatasetView<'_> {
        debug_assert!(indices.iter().all(|&i| i < self.len()));
        DatasetView {
            dataset: self,
            indices,
        }
    }

    pub fn train_view(&self) -> DatasetView<'_> {
        self.view(self.train_indices())
    }

    pub fn test_view(&self) -> DatasetView<'_> {
        self.view(self.test_indices())
    }
}

/// A borrowed subset of a dataset, identified by global example indices.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    pub dataset: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> DatasetView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Gather a batch by positions within this view.
    pub fn gather(&self, positions: &[usize]) -> (Array4<f32>, Vec<usize>) {
        let (c, h, w) = self.dataset.example_shape();
        let mut x = Array4::<f32>::zeros((positions.len(), c, h, w));
        let mut y = Vec::with_capacity(positions.len());
        for (row, &p) in positions.iter().enumerate() {
            let gi = self.indices[p];
            x.index_axis_mut(Axis(0), row)
                .assign(&self.dataset.features.index_axis(Axis(0), gi));
            y.push(self.dataset.labels[gi] as usize);
        }
        (x, y)
    }

    /// Gather every example of the view, in index order.
    pub fn gather_all(&self) -> (Array4<f32>, Vec<usize>) {
        let positions: Vec<usize> = (0..self.len()).collect();
        self.gather(&positions)
    }

    /// Global example indices for batch positions.
    pub fn global_indices(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.indices[p]).collect()
    }
}

fn dataset_digest(
    features: &Array4<f32>,
    labels: &[u8],
    num_classes: usize,
    train_count: usize,
) -> String {
    let mut h = Sha256::new();
    let (n, c, hh, ww) = features.dim();
    for d in [n, c, hh, ww, num_classes, train_count] {
        h.update((d as u64).to_le_bytes());
    }
    for &x in features.iter() {
        h.update(x.to_le_bytes());
    }
    h.update(labels);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches
// ---------------------------------------------------------------------------

const CIFAR_RECORD: usize = 3073; // label byte + 3*32*32 pixels

/// Load CIFAR-10 from the standard binary batch files
/// (`data_batch_1.bin`..`data_batch_5.bin`, `test_batch.bin`).
///
/// `n_train`/`n_test` truncate the pools for desk-scale work; pass the full
/// sizes (50000/10000) for paper scale.
pub fn load_cifar10_dir(dir: &Path, n_train: usize, n_test: usize) -> Result<Dataset> {
    let mut train_raw = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            train_raw.extend(std::fs::read(&p)?);
        }
        if train_raw.len() >= n_train * CIFAR_RECORD {
            break;
        }
    }
    let test_raw = std::fs::read(dir.join("test_batch.bin"))?;
    if train_raw.len() < n_train * CIFAR_RECORD || test_raw.len() < n_test * CIFAR_RECORD {
        return Err(CoreError::Malformed {
            path: dir.display().to_string(),
            reason: "not enough CIFAR-10 records for requested sizes".into(),
        });
    }
    let total = n_train + n_test;
    let mut features = Array4::<f32>::zeros((total, 3, 32, 32));
    let mut labels = vec![0u8; total];
    let mut fill = |row: usize, rec: &[u8]| {
        labels[row] = rec[0];
        let fs = &rec[1..];
        let mut dst = features.index_axis_mut(Axis(0), row);
        let d = dst.as_slice_mut().unwrap();
        for (i, &b) in fs.iter().enumerate() {
            d[i] = b as f32 / 255.0;
        }
    };
    for i in 0..n_train {
        fill(i, &train_raw[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD]);
    }
    for i in 0..n_test {
        fill(n_train + i, &test_raw[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD]);
    }
    Ok(Dataset::new("cifar10", features, labels, 10, n_train))
}

// ---------------------------------------------------------------------------
// Raw-array directory format
// ---------------------------------------------------------------------------

/// Manifest for the raw-array directory format.
///
/// Layout on disk:
/// - `manifest.json` with this struct
/// - feature files: f32 little-endian, row-major N*C*H*W
/// - label files: one u8 per example
#[derive(Debug, Serialize, Deserialize)]
pub struct RawManifest {
    pub name: String,
    pub num_classes: usize,
    /// (C, H, W)
    pub shape: (usize, usize, usize),
    pub train_features: String,
    pub train_labels: String,
    pub test_features: String,
    pub test_labels: String,
}

pub fn load_raw_dir(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: RawManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let (c, h, w) = manifest.shape;
    let per = c * h * w;
    let read_feats = |file: &str| -> Result<Vec<f32>> {
        let bytes = std::fs::read(dir.join(file))?;
        if bytes.len() % (4 * per) != 0 {
            return Err(CoreError::Malformed {
                path: file.into(),
                reason: format!("length {} not a multiple of example size", bytes.len()),
            });
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    };
    let train_x = read_feats(&manifest.train_features)?;
    let test_x = read_feats(&manifest.test_features)?;
    let train_y = std::fs::read(dir.join(&manifest.train_labels))?;
    let test_y = std::fs::read(dir.join(&manifest.test_labels))?;
    let n_train = train_x.len() / per;
    let n_test = test_x.len() / per;
    if train_y.len() != n_train || test_y.len() != n_test {
        return Err(CoreError::Malformed {
            path: manifest_path.display().to_string(),
            reason: "label count does not match feature count".into(),
        });
    }
    let mut all = train_x;
    all.extend(test_x);
    let features = Array4::from_shape_vec((n_train + n_test, c, h, w), all).map_err(|e| {
        CoreError::Malformed {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        }
    })?;
    let mut labels = train_y;
    labels.extend(test_y);
    Ok(Dataset::new(
        &manifest.name,
        features,
        labels,
        manifest.num_classes,
        n_train,
    ))
}

/// Write a dataset in the raw-array directory format.
pub fn save_raw_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (c, h, w) = dataset.example_shape();
    let manifest = RawManifest {
        name: dataset.name.clone(),
        num_classes: dataset.num_classes,
        shape: (c, h, w),
        train_features: "train_x.f32".into(),
        train_labels: "train_y.u8".into(),
        test_features: "test_x.f32".into(),
        test_labels: "test_y.u8".into(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let per = c * h * w;
    let flat = dataset.features.as_slice().unwrap();
    let write_feats = |file: &str, range: std::ops::Range<usize>| -> Result<()> {
        let mut bytes = Vec::with_capacity(range.len() * per * 4);
        for &x in &flat[range.start * per..range.end * per] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(dir.join(file), bytes)?;
        Ok(())
    };
    write_feats("train_x.f32", 0..dataset.train_count)?;
    write_feats("test_x.f32", dataset.train_count..dataset.len())?;
    std::fs::write(dir.join("train_y.u8"), &dataset.labels[..dataset.train_count])?;
    std::fs::write(dir.join("test_y.u8"), &dataset.labels[dataset.train_count..])?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

/// Desk-scale stand-in for CIFAR-10: 10 classes of 3x32x32 images built from
/// smooth per-class template fields. Each example mixes its class template
/// with a second class's template by a random amount, so per-example
/// difficulty genuinely varies: heavily mixed examples sit near a class
/// boundary and carry larger losses on a fitted model.
pub fn synthetic_rgb10(n_train: usize, n_test: usize, seed: u64) -> Dataset {
    let num_classes = 10;
    let (h, w) = (32, 32);
    let templates = class_templates(seed, num_classes, 3, h, w);
    let mut rng = rng_from_seed(derive_seed(seed, "synthetic_rgb10"));
    let total = n_train + n_test;
    let mut features = Array4::<f32>::zeros((total, 3, h, w));
    let mut labels = vec![0u8; total];
    use rand::Rng as _;
    let mut noise = vec![0.0f32; 3 * h * w];
    for i in 0..total {
        let y = rng.gen_range(0..num_classes);
        let mut y2 = rng.gen_range(0..num_classes - 1);
        if y2 >= y {
            y2 += 1;
        }
        // the mix tail pushes some examples near the class boundary, which
        // keeps losses spread out even after the model fits the bulk
        let mix: f32 = rng.gen_range(0.0f32..1.0).powi(2) * 0.58;
        let brightness: f32 = rng.gen_range(-0.10..0.10);
        sample_standard_normal(&mut rng, &mut noise);
        let mut img = features.index_axis_mut(Axis(0), i);
        let dst = img.as_slice_mut().unwrap();
        let ta = templates[y].as_slice().unwrap();
        let tb = templates[y2].as_slice().unwrap();
        for j in 0..dst.len() {
            let v = (1.0 - mix) * ta[j] + mix * tb[j] + 0.16 * noise[j] + brightness;
            dst[j] = v.clamp(0.0, 1.0);
        }
        labels[i] = y as u8;
    }
    Dataset::new("synthetic_rgb10", features, labels, num_classes, n_train)
}

/// Smooth random template per class: coarse seeded grid, bilinearly
/// upsampled. Distinct classes get visibly different low-frequency content.
fn class_templates(
    seed: u64,
    num_classes: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<ndarray::Array3<f32>> {
    use rand::Rng as _;
    let grid = 8usize;
    (0..num_classes)
        .map(|cls| {
            let mut rng = rng_from_seed(derive_seed_pair(seed, "template", cls as u64));
            let mut coarse = vec![0.0f32; c * grid * grid];
            for v in coarse.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            let mut out = ndarray::Array3::<f32>::zeros((c, h, w));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let fy = i as f32 / h as f32 * (grid - 1) as f32;
                        let fx = j as f32 / w as f32 * (grid - 1) as f32;
                        let (y0, x0) = (fy as usize, fx as usize);
                        let (y1, x1) = ((y0 + 1).min(grid - 1), (x0 + 1).min(grid - 1));
                        let (dy, dx) = (fy - y0 as f32, fx - x0 as f32);
                        let g = |yy: usize, xx: usize| coarse[(ci * grid + yy) * grid + xx];
                        out[[ci, i, j]] = g(y0, x0) * (1.0 - dy) * (1.0 - dx)
                            + g(y0, x1) * (1.0 - dy) * dx
                            + g(y1, x0) * dy * (1.0 - dx)
                            + g(y1, x1) * dy * dx;
                    }
                }
            }
            out
        })
        .collect()
}

fn derive_seed_pair(seed: u64, label: &str, n: u64) -> u64 {
    derive_seed(derive_seed(seed, label), &n.to_string())
}

/// Ten grayscale shape classes rendered procedurally with jitter; used for
/// the toy conditional diffusion model and its external classifier. Shapes
/// are easy to classify, so a generation-accuracy probe has a clean signal.
pub fn synthetic_shapes10(n_train: usize, n_test: usize, hw: usize, seed: u64) -> Dataset {
    assert!(hw >= 8 && hw % 4 == 0, "shape canvas must be >=8 and divide by 4");
    let num_classes = 10;
    let mut rng = rng_from_seed(derive_seed(seed, "synthetic_shapes10"));
    let total = n_train + n_test;
    let mut features = Array4::<f32>::zeros((total, 1, hw, hw));
    let mut labels = vec![0u8; total];
    use rand::Rng as _;
    for i in 0..total {
        let y = rng.gen_range(0..num_classes);
        let jx: f32 = rng.gen_range(-1.5..1.5);
        let jy: f32 = rng.gen_range(-1.5..1.5);
        let scale: f32 = rng.gen_range(0.82..1.12);
        let mut img = features.index_axis_mut(Axis(0), i);
        render_shape(y, hw, jx, jy, scale, &mut img);
        // mild additive noise, clipped to keep the [0,1] contract
        let mut noise = vec![0.0f32; hw * hw];
        sample_standard_normal(&mut rng, &mut noise);
        let d = img.as_slice_mut().unwrap();
        for (v, &n) in d.iter_mut().zip(noise.iter()) {
            *v = (*v + 0.04 * n).clamp(0.0, 1.0);
        }
        labels[i] = y as u8;
    }
    Dataset::new("synthetic_shapes10", features, labels, num_classes, n_train)
}

/// Rasterize one of ten shape classes as a soft mask.
fn render_shape(
    class: usize,
    hw: usize,
    jx: f32,
    jy: f32,
    scale: f32,
    img: &mut ndarray::ArrayViewMut3<'_, f32>,
) {
    let c = hw as f32 / 2.0;
    let (cx, cy) = (c + jx, c + jy);
    let r = scale * hw as f32 * 0.30;
    let soft = |d: f32| (0.5 - d).clamp(0.0, 1.0).min(1.0);
    for i in 0..hw {
        for j in 0..hw {
            let x = j as f32 - cx;
            let y = i as f32 - cy;
            // signed distance (approximate) to the class shape boundary
            let d = match class {
                0 => (x * x + y * y).sqrt() - r, // disc
                1 => x.abs().max(y.abs()) - r,   // square
                2 => (x.abs().min(y.abs()) - r * 0.28).max(x.abs().max(y.abs()) - r), // cross
                3 => {
                    // upward triangle: base plus two slanted edges
                    let base = y - r * 0.6;
                    let right = 1.6 * x - y - r;
                    let left = -1.6 * x - y - r;
                    base.max(right).max(left)
                }
                4 => (y.abs() - r * 0.22).max(x.abs() - r * 1.15), // horizontal bar
                5 => (x.abs() - r * 0.22).max(y.abs() - r * 1.15), // vertical bar
                6 => (x.abs() + y.abs()) - r * 1.2,                // diamond
                7 => ((x * x + y * y).sqrt() - r).abs() - r * 0.25, // ring
                8 => (x.abs().max(y.abs()) - r).max(x.min(-y)), // square minus a quadrant (L)
                9 => {
                    // 2x2 dot grid
                    let gx = (x.abs() - r * 0.55).abs();
                    let gy = (y.abs() - r * 0.55).abs();
                    (gx * gx + gy * gy).sqrt() - r * 0.34
                }
                _ => unreachable!(),
            };
            img[[0, i, j]] = soft(d).max(img[[0, i, j]]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_rgb_is_deterministic_and_in_range() {
        let a = synthetic_rgb10(50, 10, 3);
        let b = synthetic_rgb10(50, 10, 3);
        assert_eq!(a.digest, b.digest);
        assert_eq!(a.train_count, 50);
        assert_eq!(a.len(), 60);
        assert!(a.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = synthetic_rgb10(50, 10, 4);
        assert_ne!(a.digest, c.digest);
    }

    #[test]
    fn shapes_have_all_classes_and_range() {
        let d = synthetic_shapes10(200, 40, 16, 0);
        assert_eq!(d.example_shape(), (1, 16, 16));
        let mut seen = [false; 10];
        for &l in &d.labels {
            seen[l as usize] = true;
        }
        assert!(seen.iter().all(|&s| s), "all classes present");
        assert!(d.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn raw_dir_round_trip() {
        let d = synthetic_shapes10(30, 6, 16, 1);
        let dir = tempfile::tempdir().unwrap();
        save_raw_dir(&d, dir.path()).unwrap();
        let d2 = load_raw_dir(dir.path()).unwrap();
        assert_eq!(d.digest, d2.digest);
        assert_eq!(d.labels, d2.labels);
        assert_eq!(d.train_count, d2.train_count);
    }

    #[test]
    fn view_gather_matches_examples() {
        let d = synthetic_shapes10(20, 5, 16, 2);
        let v = d.view(vec![3, 7, 11]);
        let (x, y) = v.gather_all();
        assert_eq!(x.dim().0, 3);
        for (row, &gi) in [3usize, 7, 11].iter().enumerate() {
            let ex = d.example(gi);
            assert_eq!(y[row], ex.label);
            let got = x.index_axis(Axis(0), row);
            assert_eq!(got, ex.features);
        }
    }
}
