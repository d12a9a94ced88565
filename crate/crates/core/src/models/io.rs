//! Checkpoint persistence: opaque parameter blob plus a JSON sidecar.
//!
//! A checkpoint saved as `<stem>.params` / `<stem>.json` reloads to
//! bit-identical parameters; the sidecar records architecture, seeds and
//! digests so artifacts can be linked and verified.

use crate::error::{CoreError, Result};
use crate::models::classifier::ClassifierCheckpoint;
use crate::models::cnn::{ClassifierArch, ClassifierModel};
use crate::models::diffusion::{DiffusionCheckpoint, DiffusionModel, NoiseSchedule};
use crate::models::unet::UnetConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use unlearn_nn::rng::rng_from_seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String, // "classifier" | "diffusion"
    pub architecture_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub params_digest: String,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parent_checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<DiffusionMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionMeta {
    pub t_max: usize,
    pub base_channels: usize,
    pub emb_dim: usize,
    pub null_token: usize,
}

fn paths(stem: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        stem.with_extension("params"),
        stem.with_extension("json"),
    )
}

pub fn save_classifier(
    ckpt: &ClassifierCheckpoint,
    stem: &Path,
    parent: Option<String>,
) -> Result<CheckpointManifest> {
    let (pp, mp) = paths(stem);
    unlearn_nn::checkpoint::save(&ckpt.model.params, &pp)?;
    let manifest = CheckpointManifest {
        kind: "classifier".into(),
        architecture_id: ckpt.architecture_id.clone(),
        seed: ckpt.rng_seed,
        config_digest: ckpt.train_config_digest.clone(),
        params_digest: ckpt.params_digest(),
        num_classes: ckpt.model.num_classes,
        input_shape: ckpt.model.in_shape,
        parent_checkpoint: parent,
        diffusion: None,
    };
    std::fs::write(&mp, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_classifier(stem: &Path) -> Result<ClassifierCheckpoint> {
    let (pp, mp) = paths(stem);
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(&mp)?)?;
    if manifest.kind != "classifier" {
        return Err(CoreError::Malformed {
            path: mp.display().to_string(),
            reason: format!("expected classifier checkpoint, found {}", manifest.kind),
        });
    }
    let arch = ClassifierArch::from_id(&manifest.architecture_id).ok_or_else(|| {
        CoreError::Malformed {
            path: mp.display().to_string(),
            reason: format!("unknown architecture {}", manifest.architecture_id),
        }
    })?;
    let loaded = unlearn_nn::checkpoint::load(&pp)?;
    let mut rng = rng_from_seed(0);
    let mut model = ClassifierModel::new(arch, manifest.num_classes, manifest.input_shape, &mut rng);
    if model.params.names() != loaded.names() {
        return Err(CoreError::Malformed {
            path: pp.display().to_string(),
            reason: "parameter layout does not match architecture".into(),
        });
    }
    model.params.copy_from(&loaded);
    let got = unlearn_nn::checkpoint::digest(&model.params);
    if got != manifest.params_digest {
        return Err(CoreError::Malformed {
            path: pp.display().to_string(),
            reason: format!(
                "digest mismatch: manifest {} vs blob {got}",
                manifest.params_digest
            ),
        });
    }
    Ok(ClassifierCheckpoint {
        model,
        architecture_id: manifest.architecture_id,
        train_config_digest: manifest.config_digest,
        rng_seed: manifest.seed,
    })
}

pub fn save_diffusion(
    ckpt: &DiffusionCheckpoint,
    stem: &Path,
    parent: Option<String>,
) -> Result<CheckpointManifest> {
    let (pp, mp) = paths(stem);
    unlearn_nn::checkpoint::save(&ckpt.model.params, &pp)?;
    let manifest = CheckpointManifest {
        kind: "diffusion".into(),
        architecture_id: "cond_unet".into(),
        seed: ckpt.rng_seed,
        config_digest: ckpt.train_config_digest.clone(),
        params_digest: ckpt.params_digest(),
        num_classes: ckpt.model.num_classes,
        input_shape: ckpt.model.in_shape,
        parent_checkpoint: parent,
        diffusion: Some(DiffusionMeta {
            t_max: ckpt.model.t_max(),
            base_channels: ckpt.model.unet.cfg.base,
            emb_dim: ckpt.model.unet.cfg.emb_dim,
            null_token: ckpt.model.null_token(),
        }),
    };
    std::fs::write(&mp, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_diffusion(stem: &Path) -> Result<DiffusionCheckpoint> {
    let (pp, mp) = paths(stem);
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(&mp)?)?;
    let meta = manifest.diffusion.as_ref().ok_or_else(|| CoreError::Malformed {
        path: mp.display().to_string(),
        reason: "missing diffusion metadata".into(),
    })?;
    let (c, h, _w) = manifest.input_shape;
    let cfg = UnetConfig {
        in_c: c,
        hw: h,
        base: meta.base_channels,
        emb_dim: meta.emb_dim,
        num_classes: manifest.num_classes,
    };
    let loaded = unlearn_nn::checkpoint::load(&pp)?;
    let mut rng = rng_from_seed(0);
    let mut model = DiffusionModel::new(cfg, meta.t_max, &mut rng);
    model.schedule = NoiseSchedule::scaled_linear(meta.t_max);
    if model.params.names() != loaded.names() {
        return Err(CoreError::Malformed {
            path: pp.display().to_string(),
            reason: "parameter layout does not match architecture".into(),
        });
    }
    model.params.copy_from(&loaded);
    if unlearn_nn::checkpoint::digest(&model.params) != manifest.params_digest {
        return Err(CoreError::Malformed {
            path: pp.display().to_string(),
            reason: "digest mismatch".into(),
        });
    }
    Ok(DiffusionCheckpoint {
        model,
        train_config_digest: manifest.config_digest,
        rng_seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_shapes10;
    use crate::models::classifier::{train_classifier, TrainConfig};
    use ndarray::Array4;

    #[test]
    fn classifier_round_trip_is_bit_exact() {
        let d = synthetic_shapes10(32, 0, 16, 0);
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.02,
            momentum: 0.0,
            batch_size: 16,
            seed: 1,
            arch: ClassifierArch::SmallCnn,
        };
        let (ckpt, _) = train_classifier(&d.train_view(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        save_classifier(&ckpt, &stem, None).unwrap();
        let loaded = load_classifier(&stem).unwrap();
        let x = Array4::<f32>::from_elem((3, 1, 16, 16), 0.5);
        assert_eq!(ckpt.model.logits(&x), loaded.model.logits(&x));
        assert_eq!(ckpt.params_digest(), loaded.params_digest());
    }

    #[test]
    fn diffusion_round_trip_is_bit_exact() {
        use crate::models::diffusion::{sample_diffusion, train_diffusion, DiffusionTrainConfig};
        let d = synthetic_shapes10(16, 0, 8, 1);
        let cfg = DiffusionTrainConfig {
            steps: 3,
            batch_size: 4,
            lr: 1e-3,
            seed: 5,
            t_max: 8,
            base_channels: 4,
            emb_dim: 8,
            null_drop: 0.1,
        };
        let (ckpt, _) = train_diffusion(&d.train_view(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ddpm");
        save_diffusion(&ckpt, &stem, None).unwrap();
        let loaded = load_diffusion(&stem).unwrap();
        let a = sample_diffusion(&ckpt.model, 2, 1, 1.5, 3).unwrap();
        let b = sample_diffusion(&loaded.model, 2, 1, 1.5, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn load_rejects_tampered_blob() {
        let d = synthetic_shapes10(16, 0, 16, 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (ckpt, _) = train_classifier(&d.train_view(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        save_classifier(&ckpt, &stem, None).unwrap();
        // flip one byte in the blob
        let pp = stem.with_extension("params");
        let mut bytes = std::fs::read(&pp).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xFF;
        std::fs::write(&pp, bytes).unwrap();
        assert!(load_classifier(&stem).is_err());
    }
}
