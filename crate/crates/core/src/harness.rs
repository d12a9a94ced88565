//! Experiment orchestration: plans, staged execution, persistence.
//!
//! A plan pins dataset, pretraining, splits and recipes under one global
//! seed. Every stage writes its outputs plus a record in `index.json`
//! keyed by a digest of its inputs; rerunning a completed plan hits every
//! digest and recomputes nothing. Stage seeds derive from the global seed
//! by label, so any stage can be reproduced in isolation.

use crate::dataset::{load_cifar10_dir, load_raw_dir, synthetic_rgb10, synthetic_shapes10, Dataset};
use crate::diffusion_eval::{build_reference_table_exhaustive, fit_reference_table, TimestepLossTable};
use crate::engine::{run_unlearning_classifier, run_unlearning_diffusion, UnlearnRun};
use crate::error::{CoreError, Result};
use crate::evaluation::{
    accuracy, evaluate_classifier, generation_ua, mia_score, rte, EvalReport,
};
use crate::models::classifier::{save_train_log, train_classifier, TrainConfig};
use crate::models::diffusion::{train_diffusion, DiffusionTrainConfig};
use crate::models::io::{load_classifier, load_diffusion, save_classifier, save_diffusion};
use crate::objectives::{TaskKind, UnlearnRecipe};
use crate::splits::{
    make_classwise_forget_split, make_difficulty_split, make_random_forget_split, DifficultyMode,
    SplitSpec,
};
use crate::weighting::{
    build_static_table_classifier, build_static_table_diffusion, WeightTable, WeightVariant,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use unlearn_nn::rng::derive_seed;

pub const DATA_DIR_ENV: &str = "UNLEARN_DATA_DIR";

// ---------------------------------------------------------------------------
// Plan schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    SyntheticRgb10 {
        n_train: usize,
        n_test: usize,
        seed: u64,
    },
    SyntheticShapes10 {
        n_train: usize,
        n_test: usize,
        hw: usize,
        seed: u64,
    },
    Cifar10 {
        /// Defaults to $UNLEARN_DATA_DIR/cifar10 when omitted.
        dir: Option<PathBuf>,
        n_train: usize,
        n_test: usize,
    },
    RawDir {
        dir: PathBuf,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::SyntheticRgb10 {
                n_train,
                n_test,
                seed,
            } => Ok(synthetic_rgb10(*n_train, *n_test, *seed)),
            DatasetSpec::SyntheticShapes10 {
                n_train,
                n_test,
                hw,
                seed,
            } => Ok(synthetic_shapes10(*n_train, *n_test, *hw, *seed)),
            DatasetSpec::Cifar10 {
                dir,
                n_train,
                n_test,
            } => {
                let dir = match dir {
                    Some(d) => d.clone(),
                    None => PathBuf::from(
                        std::env::var(DATA_DIR_ENV).map_err(|_| {
                            CoreError::InvalidArgument(format!(
                                "cifar10 dataset needs a dir or ${DATA_DIR_ENV}"
                            ))
                        })?,
                    )
                    .join("cifar10"),
                };
                load_cifar10_dir(&dir, *n_train, *n_test)
            }
            DatasetSpec::RawDir { dir } => load_raw_dir(dir),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SplitRequest {
    Random { name: String, fraction: f64 },
    Classwise { name: String, class_id: usize },
    DifficultyEasy { name: String, fraction: f64 },
    DifficultyHard { name: String, fraction: f64 },
}

impl SplitRequest {
    pub fn name(&self) -> &str {
        match self {
            SplitRequest::Random { name, .. }
            | SplitRequest::Classwise { name, .. }
            | SplitRequest::DifficultyEasy { name, .. }
            | SplitRequest::DifficultyHard { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeEntry {
    pub name: String,
    pub split: String,
    pub recipe: UnlearnRecipe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionEvalSpec {
    pub sample_count: usize,
    pub guidance_scale: f64,
    /// Classes to probe with the external classifier; the forgotten class
    /// comes from the recipe's split.
    pub probe_classes: Vec<usize>,
    pub external_classifier: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub name: String,
    pub task: TaskKind,
    pub dataset: DatasetSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_classifier: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain_diffusion: Option<DiffusionTrainConfig>,
    /// Train the exact-unlearning reference per split.
    pub retrain: bool,
    pub splits: Vec<SplitRequest>,
    pub recipes: Vec<RecipeEntry>,
    /// Build weight/reference tables required by the recipes.
    #[serde(default = "default_true")]
    pub build_tables: bool,
    /// (num_examples, num_timesteps) for sampled reference tables; None
    /// builds them exhaustively.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table_sample: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diffusion_eval: Option<DiffusionEvalSpec>,
    pub global_seed: u64,
}

fn default_true() -> bool {
    true
}

impl ExperimentPlan {
    pub fn digest(&self) -> String {
        sha_hex(&serde_json::to_vec(self).expect("plan serializes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ExperimentPlan> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha_hex(&std::fs::read(path)?))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

/// Empty iff the plan is runnable.
pub fn validate_plan(plan: &ExperimentPlan) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |field: &str, message: String| {
        out.push(Diagnostic {
            field: field.to_string(),
            message,
        })
    };

    match plan.task {
        TaskKind::Classifier if plan.pretrain_classifier.is_none() => diag(
            "pretrain_classifier",
            "classifier plans need a pretrain config".into(),
        ),
        TaskKind::Diffusion if plan.pretrain_diffusion.is_none() => diag(
            "pretrain_diffusion",
            "diffusion plans need a pretrain config".into(),
        ),
        _ => {}
    }
    if plan.splits.is_empty() {
        diag("splits", "at least one split is required".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, s) in plan.splits.iter().enumerate() {
        if !seen.insert(s.name().to_string()) {
            diag(&format!("splits[{i}].name"), "duplicate split name".into());
        }
        match s {
            SplitRequest::Random { fraction, .. }
            | SplitRequest::DifficultyEasy { fraction, .. }
            | SplitRequest::DifficultyHard { fraction, .. } => {
                if !(*fraction > 0.0 && *fraction < 1.0) {
                    diag(
                        &format!("splits[{i}].fraction"),
                        format!("fraction must lie in (0,1), got {fraction}"),
                    );
                }
            }
            SplitRequest::Classwise { .. } => {}
        }
    }
    for (i, r) in plan.recipes.iter().enumerate() {
        if !seen.contains(&r.split) {
            diag(
                &format!("recipes[{i}].split"),
                format!("references unknown split '{}'", r.split),
            );
        }
        if let Err(e) = r.recipe.validate() {
            let field = if !(r.recipe.weighting.tau > 0.0) {
                format!("recipes[{i}].recipe.weighting.tau")
            } else {
                format!("recipes[{i}].recipe")
            };
            diag(&field, e.to_string());
        }
        if r.recipe.task != plan.task {
            diag(
                &format!("recipes[{i}].recipe.task"),
                "recipe task does not match the plan task".into(),
            );
        }
        if r.recipe.weighting.variant != WeightVariant::Off && !plan.build_tables {
            diag(
                &format!("recipes[{i}].recipe.weighting.variant"),
                "weighted recipe requires build_tables (no table stage planned)".into(),
            );
        }
    }
    if plan.task == TaskKind::Diffusion && plan.diffusion_eval.is_none() {
        diag(
            "diffusion_eval",
            "diffusion plans need an evaluation spec".into(),
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Stage tracking / idempotence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PlanIndex {
    pub plan_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub input_digest: String,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputRecord {
    pub path: String,
    pub digest: String,
}

pub struct PlanOutcome {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    pub out_dir: PathBuf,
}

struct Tracker {
    out_dir: PathBuf,
    index: PlanIndex,
    executed: Vec<String>,
    skipped: Vec<String>,
}

impl Tracker {
    fn new(out_dir: &Path, plan_digest: &str) -> Result<Self> {
        let index_path = out_dir.join("index.json");
        let index = if index_path.exists() {
            let loaded: PlanIndex = serde_json::from_str(&std::fs::read_to_string(&index_path)?)?;
            if loaded.plan_digest == plan_digest {
                loaded
            } else {
                PlanIndex {
                    plan_digest: plan_digest.to_string(),
                    ..Default::default()
                }
            }
        } else {
            PlanIndex {
                plan_digest: plan_digest.to_string(),
                ..Default::default()
            }
        };
        Ok(Self {
            out_dir: out_dir.to_path_buf(),
            index,
            executed: Vec::new(),
            skipped: Vec::new(),
        })
    }

    /// True when a previous record for `name` carries the same input digest
    /// and all of its outputs still verify on disk.
    fn can_skip(&self, name: &str, input_digest: &str) -> bool {
        match self.index.stages.get(name) {
            Some(rec) if rec.input_digest == input_digest => rec.outputs.iter().all(|o| {
                let p = PathBuf::from(&o.path);
                p.exists() && file_digest(&p).map(|d| d == o.digest).unwrap_or(false)
            }),
            _ => false,
        }
    }

    fn record(&mut self, name: &str, input_digest: &str, outputs: &[PathBuf]) -> Result<()> {
        let mut recs = Vec::new();
        for p in outputs {
            recs.push(OutputRecord {
                path: p.display().to_string(),
                digest: file_digest(p)?,
            });
        }
        self.index.stages.insert(
            name.to_string(),
            StageRecord {
                input_digest: input_digest.to_string(),
                outputs: recs,
            },
        );
        self.executed.push(name.to_string());
        self.flush()
    }

    /// Run `f` unless the stage can be skipped.
    fn stage<F>(&mut self, name: &str, input_digest: &str, outputs: &[PathBuf], f: F) -> Result<()>
    where
        F: FnOnce() -> Result<()>,
    {
        if self.can_skip(name, input_digest) {
            log::info!("stage {name}: digests hit, skipping");
            self.skipped.push(name.to_string());
            return Ok(());
        }
        log::info!("stage {name}: running");
        f()?;
        self.record(name, input_digest, outputs)
    }

    fn flush(&self) -> Result<()> {
        std::fs::write(
            self.out_dir.join("index.json"),
            serde_json::to_string_pretty(&self.index)?,
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Plan execution
// ---------------------------------------------------------------------------

/// One pending unlearning-run stage; self-contained so runs can execute on
/// worker threads.
struct RunJob {
    stage_name: String,
    input: String,
    outputs: Vec<PathBuf>,
    recipe: UnlearnRecipe,
    split: SplitSpec,
    run_dir: PathBuf,
    table_stem: PathBuf,
    ref_stem: PathBuf,
}

fn execute_run_job(
    job: &RunJob,
    dataset: &Dataset,
    task: TaskKind,
    pre_stem: &Path,
) -> Result<()> {
    log::info!("stage {}: running", job.stage_name);
    let final_stem = job.run_dir.join("final");
    job.recipe.save(&job.run_dir.join("recipe.json"))?;
    let static_table = if job.recipe.weighting.variant == WeightVariant::Static {
        Some(WeightTable::load(&job.table_stem)?)
    } else {
        None
    };
    let run = match task {
        TaskKind::Classifier => {
            let model_o = load_classifier(pre_stem)?;
            let (unlearned, run) = run_unlearning_classifier(
                &model_o,
                dataset,
                &job.split,
                &job.recipe,
                static_table.as_ref(),
            )?;
            save_classifier(&unlearned, &final_stem, Some(model_o.params_digest()))?;
            run
        }
        TaskKind::Diffusion => {
            let model_o = load_diffusion(pre_stem)?;
            let ref_table = if job.recipe.weighting.variant == WeightVariant::Dynamic {
                Some(TimestepLossTable::load(&job.ref_stem)?)
            } else {
                None
            };
            let (unlearned, run) = run_unlearning_diffusion(
                &model_o,
                dataset,
                &job.split,
                &job.recipe,
                static_table.as_ref(),
                ref_table.as_ref(),
            )?;
            save_diffusion(&unlearned, &final_stem, Some(model_o.params_digest()))?;
            run
        }
    };
    run.save_trajectory(&job.run_dir.join("trajectory.csv"))?;
    save_weight_summaries(&run, &job.run_dir.join("weight_summaries.csv"))?;
    std::fs::write(
        job.run_dir.join("run.json"),
        serde_json::to_string_pretty(&run)?,
    )?;
    Ok(())
}

/// Execute every stage of a plan under `out_dir`. Completed stages with
/// matching digests are skipped, which also makes interrupted plans
/// resumable by rerunning.
pub fn run_plan(plan: &ExperimentPlan, out_dir: &Path) -> Result<PlanOutcome> {
    run_plan_jobs(plan, out_dir, 1)
}

/// [`run_plan`] with up to `jobs` unlearning runs executing concurrently.
/// Runs are independent (each owns its run directory and model copy), so
/// results do not depend on scheduling.
pub fn run_plan_jobs(plan: &ExperimentPlan, out_dir: &Path, jobs: usize) -> Result<PlanOutcome> {
    let diags = validate_plan(plan);
    if !diags.is_empty() {
        let msg = diags
            .iter()
            .map(|d| format!("{}: {}", d.field, d.message))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(CoreError::InvalidArgument(format!("plan invalid: {msg}")));
    }
    std::fs::create_dir_all(out_dir)?;
    for sub in ["splits", "tables", "retrain", "runs", "reports", "pretrain"] {
        std::fs::create_dir_all(out_dir.join(sub))?;
    }
    plan.save(&out_dir.join("plan.json"))?;
    let plan_digest = plan.digest();
    let mut tracker = Tracker::new(out_dir, &plan_digest)?;

    let dataset = plan.dataset.load()?;
    std::fs::write(
        out_dir.join("dataset.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "spec": plan.dataset,
            "digest": dataset.digest,
            "len": dataset.len(),
            "train_count": dataset.train_count,
        }))?,
    )?;

    // --- pretrain -------------------------------------------------------
    let pre_stem = out_dir.join("pretrain/model");
    match plan.task {
        TaskKind::Classifier => {
            let mut cfg = plan.pretrain_classifier.clone().unwrap();
            cfg.seed = derive_seed(plan.global_seed, "pretrain");
            let input = sha_hex(
                format!("pretrain|{}|{}", dataset.digest, cfg.digest()).as_bytes(),
            );
            let outs = [pre_stem.with_extension("params"), pre_stem.with_extension("json")];
            let log_path = out_dir.join("pretrain/log.csv");
            tracker.stage("pretrain", &input, &outs, || {
                let (ckpt, log) = train_classifier(&dataset.train_view(), &cfg)?;
                save_classifier(&ckpt, &pre_stem, None)?;
                save_train_log(&log, &log_path)?;
                Ok(())
            })?;
        }
        TaskKind::Diffusion => {
            let mut cfg = plan.pretrain_diffusion.clone().unwrap();
            cfg.seed = derive_seed(plan.global_seed, "pretrain");
            let input = sha_hex(
                format!("pretrain|{}|{}", dataset.digest, cfg.digest()).as_bytes(),
            );
            let outs = [pre_stem.with_extension("params"), pre_stem.with_extension("json")];
            let log_path = out_dir.join("pretrain/log.csv");
            tracker.stage("pretrain", &input, &outs, || {
                let (ckpt, log) = train_diffusion(&dataset.train_view(), &cfg)?;
                save_diffusion(&ckpt, &pre_stem, None)?;
                save_train_log(&log, &log_path)?;
                Ok(())
            })?;
        }
    }

    // --- splits ----------------------------------------------------------
    for req in &plan.splits {
        let split_path = out_dir.join(format!("splits/{}.json", req.name()));
        let input = sha_hex(
            format!(
                "split|{}|{}|{}",
                dataset.digest,
                serde_json::to_string(req)?,
                plan.global_seed
            )
            .as_bytes(),
        );
        let req = req.clone();
        let ds = &dataset;
        let pre = pre_stem.clone();
        let task = plan.task;
        tracker.stage(
            &format!("split:{}", req.name()),
            &input,
            &[split_path.clone()],
            || {
                let split = match &req {
                    SplitRequest::Random { name, fraction } => make_random_forget_split(
                        ds,
                        *fraction,
                        derive_seed(plan.global_seed, &format!("split:{name}")),
                    )?,
                    SplitRequest::Classwise { class_id, .. } => {
                        make_classwise_forget_split(ds, *class_id)?
                    }
                    SplitRequest::DifficultyEasy { fraction, .. }
                    | SplitRequest::DifficultyHard { fraction, .. } => {
                        if task != TaskKind::Classifier {
                            return Err(CoreError::InvalidTask(
                                "difficulty splits need a classifier plan".into(),
                            ));
                        }
                        let ckpt = load_classifier(&pre)?;
                        let losses = crate::models::classifier::per_sample_ce_view(
                            &ckpt.model,
                            &ds.train_view(),
                            256,
                        );
                        let table: BTreeMap<usize, f64> =
                            losses.into_iter().enumerate().collect();
                        let mode = if matches!(req, SplitRequest::DifficultyEasy { .. }) {
                            DifficultyMode::Easy
                        } else {
                            DifficultyMode::Hard
                        };
                        make_difficulty_split(ds, &table, *fraction, mode)?
                    }
                };
                split.save(&split_path)?;
                Ok(())
            },
        )?;
    }

    // --- retrain references ----------------------------------------------
    if plan.retrain {
        for req in &plan.splits {
            let split = SplitSpec::load(&out_dir.join(format!("splits/{}.json", req.name())))?;
            let stem = out_dir.join(format!("retrain/{}/model", req.name()));
            std::fs::create_dir_all(stem.parent().unwrap())?;
            let input = sha_hex(
                format!("retrain|{}|{}|{}", dataset.digest, split.digest(), plan_digest)
                    .as_bytes(),
            );
            let outs = [stem.with_extension("params"), stem.with_extension("json")];
            let name = format!("retrain:{}", req.name());
            match plan.task {
                TaskKind::Classifier => {
                    let mut cfg = plan.pretrain_classifier.clone().unwrap();
                    cfg.seed = derive_seed(plan.global_seed, &format!("retrain:{}", req.name()));
                    let retain_view = dataset.view(split.retain.clone());
                    tracker.stage(&name, &input, &outs, || {
                        let (ckpt, log) = train_classifier(&retain_view, &cfg)?;
                        save_classifier(&ckpt, &stem, None)?;
                        save_train_log(&log, &stem.with_file_name("log.csv"))?;
                        Ok(())
                    })?;
                }
                TaskKind::Diffusion => {
                    let mut cfg = plan.pretrain_diffusion.clone().unwrap();
                    cfg.seed = derive_seed(plan.global_seed, &format!("retrain:{}", req.name()));
                    let retain_view = dataset.view(split.retain.clone());
                    tracker.stage(&name, &input, &outs, || {
                        let (ckpt, log) = train_diffusion(&retain_view, &cfg)?;
                        save_diffusion(&ckpt, &stem, None)?;
                        save_train_log(&log, &stem.with_file_name("log.csv"))?;
                        Ok(())
                    })?;
                }
            }
        }
    }

    // --- external classifier for diffusion evaluation ---------------------
    if plan.task == TaskKind::Diffusion {
        let spec = plan.diffusion_eval.as_ref().unwrap();
        let stem = out_dir.join("pretrain/external");
        let mut cfg = spec.external_classifier.clone();
        cfg.seed = derive_seed(plan.global_seed, "external");
        let input = sha_hex(format!("external|{}|{}", dataset.digest, cfg.digest()).as_bytes());
        let outs = [stem.with_extension("params"), stem.with_extension("json")];
        tracker.stage("external", &input, &outs, || {
            let (ckpt, _) = train_classifier(&dataset.train_view(), &cfg)?;
            save_classifier(&ckpt, &stem, None)?;
            Ok(())
        })?;
    }

    // --- table stages ------------------------------------------------------
    for entry in &plan.recipes {
        let split = SplitSpec::load(&out_dir.join(format!("splits/{}.json", entry.split)))?;
        let forget_view = dataset.view(split.forget.clone());
        let recipe = &entry.recipe;
        let table_stem = out_dir.join(format!("tables/{}", entry.name));
        let ref_stem = out_dir.join(format!("tables/ref_{}", entry.split));
        if plan.build_tables {
            match (plan.task, recipe.weighting.variant) {
                (TaskKind::Classifier, WeightVariant::Static) => {
                    let input = sha_hex(
                        format!(
                            "table|{}|{}|{}",
                            dataset.digest,
                            split.digest(),
                            recipe.weighting.tau
                        )
                        .as_bytes(),
                    );
                    let outs = [table_stem.with_extension("csv"), table_stem.with_extension("json")];
                    let pre = pre_stem.clone();
                    let fv = forget_view.clone();
                    let tau = recipe.weighting.tau;
                    let ts = table_stem.clone();
                    tracker.stage(&format!("table:{}", entry.name), &input, &outs, move || {
                        let ckpt = load_classifier(&pre)?;
                        let table = build_static_table_classifier(&ckpt.model, &fv, tau)?;
                        table.save(&ts)?;
                        Ok(())
                    })?;
                }
                (TaskKind::Diffusion, WeightVariant::Static) => {
                    let input = sha_hex(
                        format!(
                            "table|{}|{}|{}",
                            dataset.digest,
                            split.digest(),
                            recipe.weighting.tau
                        )
                        .as_bytes(),
                    );
                    let outs = [table_stem.with_extension("csv"), table_stem.with_extension("json")];
                    let pre = pre_stem.clone();
                    let fv = forget_view.clone();
                    let tau = recipe.weighting.tau;
                    let ts = table_stem.clone();
                    let seed = derive_seed(plan.global_seed, &format!("table:{}", entry.name));
                    // subsampled grid keeps the static pass tractable
                    let grid = crate::diffusion_eval::timestep_grid(
                        plan.pretrain_diffusion.as_ref().unwrap().t_max,
                        plan.table_sample.map(|(_, t)| t).unwrap_or(20),
                    );
                    tracker.stage(&format!("table:{}", entry.name), &input, &outs, move || {
                        let ckpt = load_diffusion(&pre)?;
                        let table = build_static_table_diffusion(
                            &ckpt.model,
                            &fv,
                            tau,
                            seed,
                            Some(&grid),
                        )?;
                        table.save(&ts)?;
                        Ok(())
                    })?;
                }
                (TaskKind::Diffusion, WeightVariant::Dynamic) => {
                    let input = sha_hex(
                        format!(
                            "reftable|{}|{}|{:?}",
                            dataset.digest,
                            split.digest(),
                            plan.table_sample
                        )
                        .as_bytes(),
                    );
                    let outs = [ref_stem.with_extension("csv"), ref_stem.with_extension("json")];
                    let pre = pre_stem.clone();
                    let fv = forget_view.clone();
                    let rs = ref_stem.clone();
                    let sample = plan.table_sample;
                    let seed = derive_seed(plan.global_seed, &format!("reftable:{}", entry.split));
                    tracker.stage(
                        &format!("reftable:{}", entry.split),
                        &input,
                        &outs,
                        move || {
                            let ckpt = load_diffusion(&pre)?;
                            let table = match sample {
                                Some((ne, nt)) => fit_reference_table(
                                    &ckpt.model,
                                    &fv,
                                    ne.min(fv.len()),
                                    nt,
                                    seed,
                                )?,
                                None => build_reference_table_exhaustive(&ckpt.model, &fv, seed)?,
                            };
                            table.save(&rs)?;
                            Ok(())
                        },
                    )?;
                }
                _ => {}
            }
        }
    }

    // --- unlearning runs (up to `jobs` in parallel) ------------------------
    let mut pending: Vec<RunJob> = Vec::new();
    for entry in &plan.recipes {
        let split = SplitSpec::load(&out_dir.join(format!("splits/{}.json", entry.split)))?;
        let mut recipe = entry.recipe.clone();
        recipe.seed = derive_seed(plan.global_seed, &format!("recipe:{}", entry.name));
        let run_dir = out_dir.join(format!("runs/{}", entry.name));
        std::fs::create_dir_all(&run_dir)?;
        let input = sha_hex(
            format!(
                "run|{}|{}|{}|{}",
                dataset.digest,
                split.digest(),
                recipe.digest(),
                plan_digest
            )
            .as_bytes(),
        );
        let final_stem = run_dir.join("final");
        let job = RunJob {
            stage_name: format!("run:{}", entry.name),
            input,
            outputs: vec![
                run_dir.join("recipe.json"),
                run_dir.join("trajectory.csv"),
                final_stem.with_extension("params"),
                final_stem.with_extension("json"),
            ],
            recipe,
            split,
            run_dir,
            table_stem: out_dir.join(format!("tables/{}", entry.name)),
            ref_stem: out_dir.join(format!("tables/ref_{}", entry.split)),
        };
        if tracker.can_skip(&job.stage_name, &job.input) {
            log::info!("stage {}: digests hit, skipping", job.stage_name);
            tracker.skipped.push(job.stage_name);
        } else {
            pending.push(job);
        }
    }
    {
        let task = plan.task;
        let dataset_ref = &dataset;
        let pre = pre_stem.clone();
        let results: Vec<Result<()>> = if jobs <= 1 || pending.len() <= 1 {
            pending
                .iter()
                .map(|job| execute_run_job(job, dataset_ref, task, &pre))
                .collect()
        } else {
            let next = std::sync::atomic::AtomicUsize::new(0);
            let slots: Vec<std::sync::Mutex<Option<Result<()>>>> =
                pending.iter().map(|_| std::sync::Mutex::new(None)).collect();
            std::thread::scope(|scope| {
                for _ in 0..jobs.min(pending.len()) {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if i >= pending.len() {
                            break;
                        }
                        let r = execute_run_job(&pending[i], dataset_ref, task, &pre);
                        *slots[i].lock().unwrap() = Some(r);
                    });
                }
            });
            slots
                .into_iter()
                .map(|s| s.into_inner().unwrap().expect("job completed"))
                .collect()
        };
        for (job, result) in pending.iter().zip(results) {
            result?;
            tracker.record(&job.stage_name, &job.input, &job.outputs)?;
        }
    }

    // --- reports ------------------------------------------------------------
    let mut metric_rows: Vec<(String, Vec<String>)> = Vec::new();
    let mut gap_rows: Vec<(String, Vec<String>)> = Vec::new();
    let mut timing_rows: Vec<(String, f64)> = Vec::new();

    for entry in &plan.recipes {
        let split = SplitSpec::load(&out_dir.join(format!("splits/{}.json", entry.split)))?;
        let run_dir = out_dir.join(format!("runs/{}", entry.name));
        let final_stem = run_dir.join("final");
        let run: UnlearnRun =
            serde_json::from_str(&std::fs::read_to_string(run_dir.join("run.json"))?)?;
        match plan.task {
            TaskKind::Classifier => {
                let model_u = load_classifier(&final_stem)?;
                let forget = dataset.view(split.forget.clone());
                let retain = dataset.view(split.retain.clone());
                let test = dataset.view(split.test.clone());
                let ua = accuracy(&model_u.model, &forget)?;
                let ra = accuracy(&model_u.model, &retain)?;
                let ta = accuracy(&model_u.model, &test)?;
                let mia = mia_score(&model_u.model, &retain, &test, &forget)?;
                metric_rows.push((
                    entry.name.clone(),
                    vec![
                        format!("{ua:.4}"),
                        format!("{ra:.4}"),
                        format!("{ta:.4}"),
                        format!("{:.4}", mia.score),
                    ],
                ));
                timing_rows.push((entry.name.clone(), rte(&run)));
                std::fs::write(
                    out_dir.join(format!("reports/{}_metrics.json", entry.name)),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "ua": ua, "ra": ra, "ta": ta, "mia": mia.score,
                        "mia_degenerate": mia.degenerate,
                        "rte_minutes": rte(&run),
                    }))?,
                )?;
                if plan.retrain {
                    let retrain_ck =
                        load_classifier(&out_dir.join(format!("retrain/{}/model", entry.split)))?;
                    let report =
                        evaluate_classifier(&model_u, &retrain_ck, &dataset, &split, Some(&run))?;
                    report.save_json(&out_dir.join(format!("reports/{}.json", entry.name)))?;
                    gap_rows.push((entry.name.clone(), report.csv_row()));
                }
            }
            TaskKind::Diffusion => {
                let spec = plan.diffusion_eval.as_ref().unwrap();
                let model_u = load_diffusion(&final_stem)?;
                let external = load_classifier(&out_dir.join("pretrain/external"))?;
                let forgotten_class = split.class_id.ok_or_else(|| {
                    CoreError::InvalidArgument(
                        "diffusion evaluation needs a classwise split".into(),
                    )
                })?;
                let seed = derive_seed(plan.global_seed, &format!("geneval:{}", entry.name));
                let mut probes = serde_json::Map::new();
                let ua_f = generation_ua(
                    &model_u.model,
                    forgotten_class,
                    &external.model,
                    spec.sample_count,
                    spec.guidance_scale,
                    seed,
                )?;
                probes.insert("forgotten".into(), serde_json::json!(ua_f));
                for &c in spec.probe_classes.iter().filter(|&&c| c != forgotten_class) {
                    let ua_c = generation_ua(
                        &model_u.model,
                        c,
                        &external.model,
                        spec.sample_count,
                        spec.guidance_scale,
                        derive_seed(seed, &format!("class:{c}")),
                    )?;
                    probes.insert(format!("class_{c}"), serde_json::json!(ua_c));
                }
                metric_rows.push((entry.name.clone(), vec![format!("{ua_f:.4}")]));
                timing_rows.push((entry.name.clone(), rte(&run)));
                std::fs::write(
                    out_dir.join(format!("reports/{}_generation.json", entry.name)),
                    serde_json::to_string_pretty(&serde_json::json!({
                        "forgotten_class": forgotten_class,
                        "generation_ua": probes,
                        "rte_minutes": rte(&run),
                    }))?,
                )?;
            }
        }
    }

    // metric CSVs exclude wall-clock so identical plans produce identical
    // bytes; timings go to their own file
    write_rows(
        &out_dir.join("reports/metrics.csv"),
        match plan.task {
            TaskKind::Classifier => vec!["recipe", "ua", "ra", "ta", "mia"],
            TaskKind::Diffusion => vec!["recipe", "generation_ua"],
        },
        &metric_rows,
    )?;
    if !gap_rows.is_empty() {
        let mut header = vec!["recipe"];
        header.extend(EvalReport::CSV_HEADER.iter().filter(|h| **h != "rte_minutes"));
        let gap_rows_no_rte: Vec<(String, Vec<String>)> = gap_rows
            .into_iter()
            .map(|(name, row)| {
                // drop the rte column (index 6 of csv_row)
                let filtered: Vec<String> = row
                    .into_iter()
                    .enumerate()
                    .filter(|(i, _)| *i != 6)
                    .map(|(_, v)| v)
                    .collect();
                (name, filtered)
            })
            .collect();
        write_rows(&out_dir.join("reports/gaps.csv"), header, &gap_rows_no_rte)?;
    }
    {
        let rows: Vec<(String, Vec<String>)> = timing_rows
            .into_iter()
            .map(|(n, t)| (n, vec![format!("{t:.4}")]))
            .collect();
        write_rows(
            &out_dir.join("reports/timings.csv"),
            vec!["recipe", "rte_minutes"],
            &rows,
        )?;
    }

    tracker.flush()?;
    Ok(PlanOutcome {
        executed: tracker.executed,
        skipped: tracker.skipped,
        out_dir: out_dir.to_path_buf(),
    })
}

fn write_rows(path: &Path, header: Vec<&str>, rows: &[(String, Vec<String>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for (name, cols) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(cols.iter().cloned());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn save_weight_summaries(run: &UnlearnRun, path: &Path) -> Result<()> {
    if run.weight_snapshots.is_empty() {
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "min", "median", "max"])?;
    for s in &run.weight_snapshots {
        w.write_record([
            s.epoch.to_string(),
            format!("{:.9e}", s.min),
            format!("{:.9e}", s.median),
            format!("{:.9e}", s.max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Verify every digest recorded in a plan's index against the files on
/// disk; returns the number of verified artifacts.
pub fn verify_index(out_dir: &Path) -> Result<usize> {
    let index: PlanIndex =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("index.json"))?)?;
    let mut count = 0;
    for (stage, rec) in &index.stages {
        for o in &rec.outputs {
            let p = PathBuf::from(&o.path);
            let d = file_digest(&p)?;
            if d != o.digest {
                return Err(CoreError::ContractViolation(format!(
                    "artifact {} of stage {stage} does not match its recorded digest",
                    o.path
                )));
            }
            count += 1;
        }
    }
    Ok(count)
}
