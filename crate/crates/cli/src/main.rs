//! `unlearn` — command-line front end for the unlearning toolkit.
//!
//! Exit codes: 0 success, 2 plan/argument validation failure, 3 diverged
//! training or unlearning run.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::path::PathBuf;
use unlearn_core::dataset::Dataset;
use unlearn_core::diffusion_eval::{
    build_reference_table_exhaustive, fit_reference_table, TimestepLossTable,
};
use unlearn_core::engine::{run_unlearning_classifier, run_unlearning_diffusion, UnlearnRun};
use unlearn_core::evaluation::{
    accuracy, difficulty_scatter, evaluate_classifier, save_difficulty_records,
};
use unlearn_core::harness::{
    run_plan_jobs, validate_plan, verify_index, DatasetSpec, ExperimentPlan,
};
use unlearn_core::models::classifier::{
    per_sample_ce_view, save_train_log, train_classifier, TrainConfig,
};
use unlearn_core::models::diffusion::{train_diffusion, DiffusionTrainConfig};
use unlearn_core::models::io::{load_classifier, load_diffusion, save_classifier, save_diffusion};
use unlearn_core::objectives::{TaskKind, UnlearnRecipe};
use unlearn_core::splits::{
    make_classwise_forget_split, make_difficulty_split, make_random_forget_split, DifficultyMode,
    SplitSpec,
};
use unlearn_core::weighting::{
    build_static_table_classifier, build_static_table_diffusion, WeightTable,
};
use unlearn_core::CoreError;

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Machine unlearning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classifier,
    Diffusion,
}

impl From<TaskArg> for TaskKind {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classifier => TaskKind::Classifier,
            TaskArg::Diffusion => TaskKind::Diffusion,
        }
    }
}

#[derive(Args)]
struct DatasetArg {
    /// Dataset spec JSON (see README for the schema).
    #[arg(long)]
    dataset: PathBuf,
}

impl DatasetArg {
    fn load(&self) -> anyhow::Result<Dataset> {
        let spec: DatasetSpec = serde_json::from_str(
            &std::fs::read_to_string(&self.dataset)
                .with_context(|| format!("reading {}", self.dataset.display()))?,
        )?;
        Ok(spec.load()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate and execute an experiment plan.
    Plan {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the plan's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume a previously interrupted plan (same as rerunning).
        #[arg(long)]
        resume: bool,
        /// Maximum number of unlearning runs to execute concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Only report diagnostics, do not run.
        #[arg(long)]
        check: bool,
    },
    /// Train the original model on the full training pool.
    Pretrain {
        #[command(flatten)]
        dataset: DatasetArg,
        /// Train config JSON (classifier or diffusion depending on --task).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Classifier)]
        task: TaskArg,
        /// Output checkpoint stem (writes <stem>.params/.json and log.csv).
        #[arg(long)]
        out: PathBuf,
        /// Restrict training to the retain side of a split (retrain oracle).
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split_side: String,
    },
    /// Construct a forget/retain/test split.
    Split {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        class_id: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of per-index reference losses (index,loss) for difficulty modes;
        /// computed from --model when omitted.
        #[arg(long)]
        losses: Option<PathBuf>,
        /// Original-model checkpoint stem for difficulty modes.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a static weight table or a diffusion timestep reference table.
    Table {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::Classifier)]
        task: TaskArg,
        /// Temperature for a static weight table.
        #[arg(long)]
        tau: Option<f64>,
        /// Build the per-timestep reference table instead (diffusion only).
        #[arg(long)]
        reference: bool,
        /// Sample plan for the reference table: number of examples.
        #[arg(long)]
        num_examples: Option<usize>,
        /// Sample plan for the reference table: number of timesteps.
        #[arg(long)]
        num_timesteps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute one unlearning run.
    Run {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Original model checkpoint stem.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        static_table: Option<PathBuf>,
        #[arg(long)]
        ref_table: Option<PathBuf>,
    },
    /// Evaluate an unlearned model against a retrain reference.
    Eval {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        retrain: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// run.json of the unlearning run, for the RTE column.
        #[arg(long)]
        run_json: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Difficulty analyses over a finished run.
    Analyze {
        #[command(flatten)]
        dataset: DatasetArg,
        /// Original model stem.
        #[arg(long)]
        model_o: PathBuf,
        /// Unlearned model stem.
        #[arg(long)]
        model_u: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Output CSV of (index, loss_on_original, forgotten).
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit plot-ready CSVs from a plan output directory.
    PlotData {
        /// Plan output directory.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        what: PlotKind,
        #[arg(long)]
        out: PathBuf,
        /// Recipe name for per-recipe plots.
        #[arg(long)]
        recipe: Option<String>,
    },
    /// Verify every artifact digest recorded in a plan index.
    Verify {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    /// Per-example (loss on original, forgotten?) scatter.
    Scatter,
    /// UA over unlearning epochs for every recipe.
    UaEpochs,
    /// Mean loss of each model on forget/retain/test.
    AvgLoss,
    /// Metric rows for easy-vs-hard split comparisons.
    EasyHard,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<CoreError>() {
                Some(CoreError::InvalidArgument(_)) | Some(CoreError::InvalidTask(_)) => 2,
                Some(CoreError::TrainingDiverged { .. })
                | Some(CoreError::UnlearnDiverged { .. }) => 3,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Plan {
            plan,
            out,
            seed,
            resume: _,
            jobs,
            check,
        } => {
            let mut plan = ExperimentPlan::load(&plan)?;
            if let Some(s) = seed {
                plan.global_seed = s;
            }
            let diags = validate_plan(&plan);
            if !diags.is_empty() {
                for d in &diags {
                    eprintln!("invalid: {}: {}", d.field, d.message);
                }
                std::process::exit(2);
            }
            if check {
                println!("plan ok ({} splits, {} recipes)", plan.splits.len(), plan.recipes.len());
                return Ok(());
            }
            let outcome = run_plan_jobs(&plan, &out, jobs.max(1))?;
            println!(
                "plan complete: {} stages executed, {} skipped -> {}",
                outcome.executed.len(),
                outcome.skipped.len(),
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::Pretrain {
            dataset,
            config,
            task,
            out,
            split,
            split_side,
        } => {
            let ds = dataset.load()?;
            let view = match &split {
                None => ds.train_view(),
                Some(p) => {
                    let split = SplitSpec::load(p)?;
                    split.validate(&ds)?;
                    match split_side.as_str() {
                        "retain" => ds.view(split.retain.clone()),
                        "train" => ds.train_view(),
                        other => bail!("unknown split side {other}"),
                    }
                }
            };
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            match TaskKind::from(task) {
                TaskKind::Classifier => {
                    let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
                    let (ckpt, log) = train_classifier(&view, &cfg)?;
                    save_classifier(&ckpt, &out, None)?;
                    save_train_log(&log, &out.with_file_name("log.csv"))?;
                    println!("saved {} ({} params)", out.display(), ckpt.model.params.num_scalars());
                }
                TaskKind::Diffusion => {
                    let cfg: DiffusionTrainConfig =
                        serde_json::from_str(&std::fs::read_to_string(&config)?)?;
                    let (ckpt, log) = train_diffusion(&view, &cfg)?;
                    save_diffusion(&ckpt, &out, None)?;
                    save_train_log(&log, &out.with_file_name("log.csv"))?;
                    println!("saved {} ({} params)", out.display(), ckpt.model.params.num_scalars());
                }
            }
            Ok(())
        }
        Command::Split {
            dataset,
            mode,
            fraction,
            class_id,
            seed,
            losses,
            model,
            out,
        } => {
            let ds = dataset.load()?;
            let split = match mode.as_str() {
                "random" => {
                    let f = fraction.context("--fraction required for random splits")?;
                    make_random_forget_split(&ds, f, seed)?
                }
                "classwise" => {
                    let c = class_id.context("--class-id required for classwise splits")?;
                    make_classwise_forget_split(&ds, c)?
                }
                "difficulty-easy" | "difficulty-hard" => {
                    let f = fraction.context("--fraction required for difficulty splits")?;
                    let table = load_loss_table(&ds, losses.as_deref(), model.as_deref())?;
                    let m = if mode == "difficulty-easy" {
                        DifficultyMode::Easy
                    } else {
                        DifficultyMode::Hard
                    };
                    make_difficulty_split(&ds, &table, f, m)?
                }
                other => bail!("unknown split mode {other}"),
            };
            split.save(&out)?;
            println!(
                "split {} -> forget {}, retain {}, test {}",
                out.display(),
                split.forget.len(),
                split.retain.len(),
                split.test.len()
            );
            Ok(())
        }
        Command::Table {
            dataset,
            model,
            split,
            task,
            tau,
            reference,
            num_examples,
            num_timesteps,
            seed,
            out,
        } => {
            let ds = dataset.load()?;
            let split = SplitSpec::load(&split)?;
            split.validate(&ds)?;
            let forget_view = ds.view(split.forget.clone());
            match (TaskKind::from(task), reference) {
                (TaskKind::Classifier, false) => {
                    let tau = tau.context("--tau required for weight tables")?;
                    let ckpt = load_classifier(&model)?;
                    let table = build_static_table_classifier(&ckpt.model, &forget_view, tau)?;
                    table.save(&out)?;
                    println!("weight table with {} entries -> {}", table.entries.len(), out.display());
                }
                (TaskKind::Diffusion, false) => {
                    let tau = tau.context("--tau required for weight tables")?;
                    let ckpt = load_diffusion(&model)?;
                    let grid = num_timesteps.map(|n| {
                        unlearn_core::diffusion_eval::timestep_grid(ckpt.model.t_max(), n)
                    });
                    let table = build_static_table_diffusion(
                        &ckpt.model,
                        &forget_view,
                        tau,
                        seed,
                        grid.as_deref(),
                    )?;
                    table.save(&out)?;
                    println!("weight table with {} entries -> {}", table.entries.len(), out.display());
                }
                (TaskKind::Diffusion, true) => {
                    let ckpt = load_diffusion(&model)?;
                    let table = match (num_examples, num_timesteps) {
                        (Some(ne), Some(nt)) => {
                            fit_reference_table(&ckpt.model, &forget_view, ne, nt, seed)?
                        }
                        _ => build_reference_table_exhaustive(&ckpt.model, &forget_view, seed)?,
                    };
                    table.save(&out)?;
                    println!(
                        "reference table ({:?}, T={}) -> {}",
                        table.source,
                        table.t_max,
                        out.display()
                    );
                }
                (TaskKind::Classifier, true) => {
                    bail!("reference tables only exist for diffusion models")
                }
            }
            Ok(())
        }
        Command::Run {
            dataset,
            recipe,
            split,
            model,
            out,
            static_table,
            ref_table,
        } => {
            let ds = dataset.load()?;
            let recipe = UnlearnRecipe::load(&recipe)?;
            let split = SplitSpec::load(&split)?;
            std::fs::create_dir_all(&out)?;
            let static_table = match &static_table {
                Some(p) => Some(WeightTable::load(p)?),
                None => None,
            };
            let final_stem = out.join("final");
            let run = match recipe.task {
                TaskKind::Classifier => {
                    let model_o = load_classifier(&model)?;
                    let (unlearned, run) = run_unlearning_classifier(
                        &model_o,
                        &ds,
                        &split,
                        &recipe,
                        static_table.as_ref(),
                    )?;
                    save_classifier(&unlearned, &final_stem, Some(model_o.params_digest()))?;
                    run
                }
                TaskKind::Diffusion => {
                    let model_o = load_diffusion(&model)?;
                    let ref_table = match &ref_table {
                        Some(p) => Some(TimestepLossTable::load(p)?),
                        None => None,
                    };
                    let (unlearned, run) = run_unlearning_diffusion(
                        &model_o,
                        &ds,
                        &split,
                        &recipe,
                        static_table.as_ref(),
                        ref_table.as_ref(),
                    )?;
                    save_diffusion(&unlearned, &final_stem, Some(model_o.params_digest()))?;
                    run
                }
            };
            recipe.save(&out.join("recipe.json"))?;
            run.save_trajectory(&out.join("trajectory.csv"))?;
            std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&run)?)?;
            println!(
                "run complete: {} epochs, final checkpoint {}",
                run.trajectory.len(),
                run.final_checkpoint
            );
            Ok(())
        }
        Command::Eval {
            dataset,
            model,
            retrain,
            split,
            run_json,
            out,
        } => {
            let ds = dataset.load()?;
            let split = SplitSpec::load(&split)?;
            let model_u = load_classifier(&model)?;
            let retrain_ck = load_classifier(&retrain)?;
            let run: Option<UnlearnRun> = match run_json {
                Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
                None => None,
            };
            let report = evaluate_classifier(&model_u, &retrain_ck, &ds, &split, run.as_ref())?;
            report.save_json(&out)?;
            println!(
                "UA {:.2} RA {:.2} TA {:.2} MIA {:.2} ToW {:.2} Avg.G {:.2}",
                report.ua, report.ra, report.ta, report.mia, report.tow, report.avg_gap
            );
            Ok(())
        }
        Command::Analyze {
            dataset,
            model_o,
            model_u,
            split,
            out,
        } => {
            let ds = dataset.load()?;
            let split = SplitSpec::load(&split)?;
            let o = load_classifier(&model_o)?;
            let u = load_classifier(&model_u)?;
            let forget_view = ds.view(split.forget.clone());
            let records = difficulty_scatter(&o.model, &u.model, &forget_view);
            save_difficulty_records(&records, &out)?;
            let (f_mean, k_mean) = group_means(&records);
            println!(
                "{} records -> {} (mean loss forgotten {:.4}, kept {:.4})",
                records.len(),
                out.display(),
                f_mean,
                k_mean
            );
            Ok(())
        }
        Command::PlotData {
            run,
            what,
            out,
            recipe,
        } => plot_data(&run, what, &out, recipe.as_deref()),
        Command::Verify { run } => {
            let n = verify_index(&run)?;
            println!("{n} artifacts verified");
            Ok(())
        }
    }
}

fn load_loss_table(
    ds: &Dataset,
    losses: Option<&std::path::Path>,
    model: Option<&std::path::Path>,
) -> anyhow::Result<BTreeMap<usize, f64>> {
    match (losses, model) {
        (Some(path), _) => {
            let mut table = BTreeMap::new();
            let mut rdr = csv::Reader::from_path(path)?;
            for rec in rdr.records() {
                let rec = rec?;
                table.insert(rec[0].parse::<usize>()?, rec[1].parse::<f64>()?);
            }
            Ok(table)
        }
        (None, Some(stem)) => {
            let ckpt = load_classifier(stem)?;
            let losses = per_sample_ce_view(&ckpt.model, &ds.train_view(), 256);
            Ok(losses.into_iter().enumerate().collect())
        }
        (None, None) => bail!("difficulty splits need --losses or --model"),
    }
}

fn group_means(records: &[unlearn_core::evaluation::DifficultyRecord]) -> (f64, f64) {
    let mut fs = (0.0, 0usize);
    let mut ks = (0.0, 0usize);
    for r in records {
        if r.forgotten {
            fs = (fs.0 + r.loss_on_original, fs.1 + 1);
        } else {
            ks = (ks.0 + r.loss_on_original, ks.1 + 1);
        }
    }
    (
        fs.0 / fs.1.max(1) as f64,
        ks.0 / ks.1.max(1) as f64,
    )
}

fn plot_data(
    run_dir: &std::path::Path,
    what: PlotKind,
    out: &std::path::Path,
    recipe: Option<&str>,
) -> anyhow::Result<()> {
    let plan = ExperimentPlan::load(&run_dir.join("plan.json"))?;
    match what {
        PlotKind::Scatter => {
            let name = recipe.context("--recipe required for scatter data")?;
            let entry = plan
                .recipes
                .iter()
                .find(|r| r.name == name)
                .with_context(|| format!("recipe {name} not in plan"))?;
            let ds = plan.dataset.load()?;
            let split = SplitSpec::load(&run_dir.join(format!("splits/{}.json", entry.split)))?;
            let o = load_classifier(&run_dir.join("pretrain/model"))?;
            let u = load_classifier(&run_dir.join(format!("runs/{name}/final")))?;
            let records = difficulty_scatter(&o.model, &u.model, &ds.view(split.forget.clone()));
            save_difficulty_records(&records, out)?;
        }
        PlotKind::UaEpochs => {
            let mut w = csv::Writer::from_path(out)?;
            w.write_record(["recipe", "epoch", "ua"])?;
            for entry in &plan.recipes {
                let run: UnlearnRun = serde_json::from_str(&std::fs::read_to_string(
                    run_dir.join(format!("runs/{}/run.json", entry.name)),
                )?)?;
                for rec in &run.trajectory {
                    if let Some(ua) = rec.ua {
                        w.write_record([
                            entry.name.clone(),
                            rec.epoch.to_string(),
                            format!("{ua:.4}"),
                        ])?;
                    }
                }
            }
            w.flush()?;
        }
        PlotKind::AvgLoss => {
            let ds = plan.dataset.load()?;
            let mut w = csv::Writer::from_path(out)?;
            w.write_record(["model", "split", "avg_loss"])?;
            let mut emit = |name: &str,
                            model: &unlearn_core::models::ClassifierModel,
                            split: &SplitSpec|
             -> anyhow::Result<()> {
                for (side, idx) in [
                    ("forget", &split.forget),
                    ("retain", &split.retain),
                    ("test", &split.test),
                ] {
                    let view = ds.view(idx.clone());
                    let losses = per_sample_ce_view(model, &view, 256);
                    let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
                    w.write_record([name.to_string(), side.to_string(), format!("{mean:.6}")])?;
                }
                Ok(())
            };
            let o = load_classifier(&run_dir.join("pretrain/model"))?;
            for entry in &plan.recipes {
                let split = SplitSpec::load(&run_dir.join(format!("splits/{}.json", entry.split)))?;
                emit("original", &o.model, &split)?;
                let u = load_classifier(&run_dir.join(format!("runs/{}/final", entry.name)))?;
                emit(&entry.name, &u.model, &split)?;
                let retrain_stem = run_dir.join(format!("retrain/{}/model", entry.split));
                if retrain_stem.with_extension("json").exists() {
                    let r = load_classifier(&retrain_stem)?;
                    emit(&format!("retrain_{}", entry.split), &r.model, &split)?;
                }
            }
            w.flush()?;
        }
        PlotKind::EasyHard => {
            let ds = plan.dataset.load()?;
            let mut w = csv::Writer::from_path(out)?;
            w.write_record(["recipe", "split", "mode", "ua", "ra", "ta"])?;
            for entry in &plan.recipes {
                let split = SplitSpec::load(&run_dir.join(format!("splits/{}.json", entry.split)))?;
                let mode = format!("{:?}", split.mode);
                let u = load_classifier(&run_dir.join(format!("runs/{}/final", entry.name)))?;
                let ua = accuracy(&u.model, &ds.view(split.forget.clone()))?;
                let ra = accuracy(&u.model, &ds.view(split.retain.clone()))?;
                let ta = accuracy(&u.model, &ds.view(split.test.clone()))?;
                w.write_record([
                    entry.name.clone(),
                    entry.split.clone(),
                    mode,
                    format!("{ua:.4}"),
                    format!("{ra:.4}"),
                    format!("{ta:.4}"),
                ])?;
            }
            w.flush()?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}
