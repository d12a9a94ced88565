//! Plan validation, staged execution, idempotence and artifact digests.

use unlearn_core::harness::{
    run_plan, validate_plan, verify_index, DatasetSpec, ExperimentPlan, RecipeEntry, SplitRequest,
};
use unlearn_core::models::classifier::TrainConfig;
use unlearn_core::models::ClassifierArch;
use unlearn_core::objectives::{TaskKind, UnlearnMethod, UnlearnRecipe};
use unlearn_core::weighting::{WeightVariant, WeightingConfig};

fn tiny_plan(retrain: bool, global_seed: u64) -> ExperimentPlan {
    ExperimentPlan {
        name: "tiny".into(),
        task: TaskKind::Classifier,
        dataset: DatasetSpec::SyntheticShapes10 {
            n_train: 80,
            n_test: 20,
            hw: 16,
            seed: 11,
        },
        pretrain_classifier: Some(TrainConfig {
            epochs: 2,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
            seed: 0,
            arch: ClassifierArch::SmallCnn,
        }),
        pretrain_diffusion: None,
        retrain,
        splits: vec![SplitRequest::Random {
            name: "r10".into(),
            fraction: 0.1,
        }],
        recipes: vec![RecipeEntry {
            name: "ga".into(),
            split: "r10".into(),
            recipe: UnlearnRecipe {
                method: UnlearnMethod::Ga,
                alpha: 0.0,
                weighting: WeightingConfig::off(),
                epochs: 1,
                lr: 0.01,
                batch_size: 16,
                mask_fraction: 1.0,
                seed: 0,
                task: TaskKind::Classifier,
                redraw_labels_per_step: true,
                momentum: 0.0,
            },
        }],
        build_tables: true,
        table_sample: None,
        diffusion_eval: None,
        global_seed,
    }
}

#[test]
fn valid_plan_has_no_diagnostics() {
    let plan = tiny_plan(false, 0);
    assert!(validate_plan(&plan).is_empty());
}

#[test]
fn negative_tau_is_diagnosed_by_field() {
    let mut plan = tiny_plan(false, 0);
    plan.recipes[0].recipe.weighting = WeightingConfig {
        tau: -1.0,
        variant: WeightVariant::Dynamic,
    };
    let diags = validate_plan(&plan);
    assert!(
        diags.iter().any(|d| d.field.contains("weighting.tau")),
        "diagnostics: {diags:?}"
    );
}

#[test]
fn weighted_recipe_without_table_stage_is_diagnosed() {
    let mut plan = tiny_plan(false, 0);
    plan.build_tables = false;
    plan.recipes[0].recipe.weighting = WeightingConfig {
        tau: 10.0,
        variant: WeightVariant::Static,
    };
    let diags = validate_plan(&plan);
    assert!(
        diags
            .iter()
            .any(|d| d.message.contains("table") && d.field.contains("weighting")),
        "diagnostics: {diags:?}"
    );
}

#[test]
fn unknown_split_reference_is_diagnosed() {
    let mut plan = tiny_plan(false, 0);
    plan.recipes[0].split = "nope".into();
    let diags = validate_plan(&plan);
    assert!(diags.iter().any(|d| d.field.contains("split")));
}

#[test]
fn plan_without_retrain_produces_expected_stage_set() {
    let plan = tiny_plan(false, 1);
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_plan(&plan, dir.path()).unwrap();
    // pretrain + split + run (report is not a tracked stage)
    assert_eq!(outcome.executed.len(), 3, "{:?}", outcome.executed);
    assert!(outcome.executed.iter().any(|s| s == "pretrain"));
    assert!(outcome.executed.iter().any(|s| s.starts_with("split:")));
    assert!(outcome.executed.iter().any(|s| s.starts_with("run:")));
    assert!(dir.path().join("reports/ga_metrics.json").exists());
    assert!(dir.path().join("runs/ga/trajectory.csv").exists());
    assert!(!dir.path().join("reports/ga.json").exists(), "no retrain, no gap report");
}

#[test]
fn rerunning_a_completed_plan_recomputes_nothing() {
    let plan = tiny_plan(true, 2);
    let dir = tempfile::tempdir().unwrap();
    let first = run_plan(&plan, dir.path()).unwrap();
    assert!(first.skipped.is_empty());
    let second = run_plan(&plan, dir.path()).unwrap();
    assert!(
        second.executed.is_empty(),
        "rerun executed {:?}",
        second.executed
    );
    assert_eq!(second.skipped.len(), first.executed.len());
    // every artifact in the index verifies against disk
    let verified = verify_index(dir.path()).unwrap();
    assert!(verified >= 6);
}

#[test]
fn identical_plans_yield_identical_metric_csvs() {
    let plan = tiny_plan(true, 3);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_plan(&plan, dir_a.path()).unwrap();
    run_plan(&plan, dir_b.path()).unwrap();
    for name in ["reports/metrics.csv", "reports/gaps.csv"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical plans");
    }
    // final checkpoints byte-identical too
    let a = std::fs::read(dir_a.path().join("runs/ga/final.params")).unwrap();
    let b = std::fs::read(dir_b.path().join("runs/ga/final.params")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn different_global_seeds_change_artifacts() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_plan(&tiny_plan(false, 4), dir_a.path()).unwrap();
    run_plan(&tiny_plan(false, 5), dir_b.path()).unwrap();
    let a = std::fs::read(dir_a.path().join("pretrain/model.params")).unwrap();
    let b = std::fs::read(dir_b.path().join("pretrain/model.params")).unwrap();
    assert_ne!(a, b);
}
