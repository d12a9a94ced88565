//! Forget/retain/test partitioning.
//!
//! Every constructor is pure given (dataset digest, arguments) and the
//! resulting `SplitSpec` persists as JSON so retrain and unlearn runs can
//! provably share a partition.

use crate::dataset::Dataset;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use unlearn_nn::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Random,
    Classwise,
    DifficultyEasy,
    DifficultyHard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    pub forget: Vec<usize>,
    pub retain: Vec<usize>,
    pub test: Vec<usize>,
    pub dataset_digest: String,
}

impl SplitSpec {
    /// forget ∪ retain must partition the training pool; test is the rest.
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.dataset_digest != dataset.digest {
            return Err(CoreError::ContractViolation(
                "split references a different dataset digest".into(),
            ));
        }
        let mut seen = vec![false; dataset.train_count];
        for &i in self.forget.iter().chain(self.retain.iter()) {
            if i >= dataset.train_count || seen[i] {
                return Err(CoreError::ContractViolation(format!(
                    "index {i} outside training pool or duplicated"
                )));
            }
            seen[i] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(CoreError::ContractViolation(
                "forget ∪ retain does not cover the training pool".into(),
            ));
        }
        if self.test.iter().any(|&i| i < dataset.train_count) {
            return Err(CoreError::ContractViolation(
                "test indices overlap the training pool".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitSpec> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Hex digest over the serialized split, used to link artifacts.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("split serializes"));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn finish(
    dataset: &Dataset,
    mode: SplitMode,
    seed: u64,
    fraction: Option<f64>,
    class_id: Option<usize>,
    mut forget: Vec<usize>,
) -> SplitSpec {
    forget.sort_unstable();
    let mut in_forget = vec![false; dataset.train_count];
    for &i in &forget {
        in_forget[i] = true;
    }
    let retain: Vec<usize> = (0..dataset.train_count).filter(|&i| !in_forget[i]).collect();
    SplitSpec {
        mode,
        seed,
        fraction,
        class_id,
        forget,
        retain,
        test: dataset.test_indices(),
        dataset_digest: dataset.digest.clone(),
    }
}

/// Uniformly sample `round(fraction * train_count)` forgetting examples.
pub fn make_random_forget_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "fraction must lie in (0,1), got {fraction}"
        )));
    }
    if dataset.train_count == 0 {
        return Err(CoreError::InvalidArgument("empty training pool".into()));
    }
    let k = (fraction * dataset.train_count as f64).round() as usize;
    let k = k.clamp(1, dataset.train_count - 1);
    let mut rng = rng_from_seed(seed);
    let chosen = rand::seq::index::sample(&mut rng, dataset.train_count, k).into_vec();
    Ok(finish(
        dataset,
        SplitMode::Random,
        seed,
        Some(fraction),
        None,
        chosen,
    ))
}

/// Forget exactly the training examples labeled `class_id`.
pub fn make_classwise_forget_split(dataset: &Dataset, class_id: usize) -> Result<SplitSpec> {
    if class_id >= dataset.num_classes {
        return Err(CoreError::InvalidArgument(format!(
            "class_id {class_id} out of range ({} classes)",
            dataset.num_classes
        )));
    }
    let forget: Vec<usize> = (0..dataset.train_count)
        .filter(|&i| dataset.labels[i] as usize == class_id)
        .collect();
    if forget.is_empty() {
        return Err(CoreError::EmptyForgetSet(format!(
            "class {class_id} absent from the training pool"
        )));
    }
    Ok(finish(
        dataset,
        SplitMode::Classwise,
        0,
        None,
        Some(class_id),
        forget,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DifficultyMode {
    /// Largest reference loss first (easiest to forget).
    Easy,
    /// Smallest reference loss first (hardest to forget).
    Hard,
}

/// Rank training examples by reference loss and forget the top fraction.
/// Ties break by ascending index.
pub fn make_difficulty_split(
    dataset: &Dataset,
    loss_table: &BTreeMap<usize, f64>,
    fraction: f64,
    mode: DifficultyMode,
) -> Result<SplitSpec> {
    let n = dataset.train_count;
    for i in 0..n {
        if !loss_table.contains_key(&i) {
            return Err(CoreError::InvalidArgument(format!(
                "loss table missing training index {i}"
            )));
        }
    }
    let k = (fraction * n as f64).round() as usize;
    if fraction * (n as f64) < 1.0 {
        return Err(CoreError::InvalidArgument(format!(
            "fraction {fraction} selects no examples from {n}"
        )));
    }
    let k = k.clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    match mode {
        DifficultyMode::Easy => order.sort_by(|&a, &b| {
            loss_table[&b]
                .partial_cmp(&loss_table[&a])
                .unwrap()
                .then(a.cmp(&b))
        }),
        DifficultyMode::Hard => order.sort_by(|&a, &b| {
            loss_table[&a]
                .partial_cmp(&loss_table[&b])
                .unwrap()
                .then(a.cmp(&b))
        }),
    }
    let forget: Vec<usize> = order[..k].to_vec();
    let split_mode = match mode {
        DifficultyMode::Easy => SplitMode::DifficultyEasy,
        DifficultyMode::Hard => SplitMode::DifficultyHard,
    };
    Ok(finish(dataset, split_mode, 0, Some(fraction), None, forget))
}
