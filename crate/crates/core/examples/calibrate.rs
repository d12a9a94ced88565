use std::time::Instant;
use unlearn_core::dataset::synthetic_rgb10;
use unlearn_core::engine::run_unlearning_classifier;
use unlearn_core::evaluation::{easy_hard_comparison, evaluate_classifier};
use unlearn_core::models::classifier::{per_sample_ce_view, train_classifier, TrainConfig};
use unlearn_core::models::ClassifierArch;
use unlearn_core::objectives::{TaskKind, UnlearnMethod, UnlearnRecipe};
use unlearn_core::splits::{make_classwise_forget_split, make_random_forget_split};
use unlearn_core::weighting::{WeightVariant, WeightingConfig};

fn recipe(method: UnlearnMethod, weighting: WeightingConfig, epochs: usize, lr: f64, seed: u64) -> UnlearnRecipe {
    UnlearnRecipe {
        method,
        alpha: 1.0,
        weighting,
        epochs,
        lr,
        batch_size: 256,
        mask_fraction: 0.5,
        seed,
        task: TaskKind::Classifier,
        redraw_labels_per_step: true,
        momentum: 0.0,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let what = args.get(1).map(|s| s.as_str()).unwrap_or("all");
    let d = synthetic_rgb10(5000, 1000, 42);
    let cfg = TrainConfig {
        epochs: 10,
        lr: 0.05,
        momentum: 0.9,
        batch_size: 256,
        seed: 0,
        arch: ClassifierArch::SmallCnn,
    };
    let t0 = Instant::now();
    let (ckpt, log) = train_classifier(&d.train_view(), &cfg).unwrap();
    println!(
        "pretrain {:.0}s train-acc {:.2}",
        t0.elapsed().as_secs_f64(),
        log.last().unwrap().accuracy.unwrap()
    );

    if what == "all" || what == "gar" {
        // --- GAR vs GAR + dynamic weighting on 10% random forgetting
        let split = make_random_forget_split(&d, 0.10, 0).unwrap();
        let (retr, _) = train_classifier(&d.view(split.retain.clone()), &TrainConfig { seed: 1000, ..cfg.clone() }).unwrap();
        for (label, w, lr) in [
            ("GAR        ", WeightingConfig::off(), 0.004),
            ("GAR+LoReUnD", WeightingConfig { tau: 10.0, variant: WeightVariant::Dynamic }, 0.004),
        ] {
            let r = recipe(UnlearnMethod::Gar, w, 5, lr, 7);
            let t0 = Instant::now();
            let (u, run) = run_unlearning_classifier(&ckpt, &d, &split, &r, None).unwrap();
            let rep = evaluate_classifier(&u, &retr, &d, &split, Some(&run)).unwrap();
            println!(
                "{label} lr={lr}: UA {:.2} RA {:.2} TA {:.2} MIA {:.2} ToW {:.2} AvgG {:.2}  ({:.0}s)",
                rep.ua, rep.ra, rep.ta, rep.mia, rep.tow, rep.avg_gap,
                t0.elapsed().as_secs_f64()
            );
        }
    }

    if what == "all" || what == "classwise" {
        // --- classwise RL vs RL + dynamic weighting, UA per epoch
        let split = make_classwise_forget_split(&d, 3).unwrap();
        for (label, w, lr) in [
            ("RL         ", WeightingConfig::off(), 0.01),
            ("RL+LoReUnD ", WeightingConfig { tau: 50.0, variant: WeightVariant::Dynamic }, 0.01),
        ] {
            let r = recipe(UnlearnMethod::Rl, w, 8, lr, 7);
            let (_, run) = run_unlearning_classifier(&ckpt, &d, &split, &r, None).unwrap();
            let uas: Vec<String> = run.trajectory.iter().map(|t| format!("{:.1}", t.ua.unwrap())).collect();
            println!("{label} classwise UA/epoch: {}", uas.join(" "));
        }
    }

    if what == "all" || what == "easyhard" {
        // --- easy vs hard difficulty splits
        let losses = per_sample_ce_view(&ckpt.model, &d.train_view(), 256);
        let table: std::collections::BTreeMap<usize, f64> = losses.into_iter().enumerate().collect();
        let r = recipe(UnlearnMethod::Rl, WeightingConfig::off(), 5, 0.004, 7);
        let t0 = Instant::now();
        let (easy, hard) = easy_hard_comparison(&d, &ckpt, &table, &TrainConfig { seed: 2000, ..cfg.clone() }, &r, 0.10).unwrap();
        println!(
            "easy: UA {:.2} RA {:.2} TA {:.2} MIA {:.2} AvgG {:.2} | hard: UA {:.2} RA {:.2} TA {:.2} MIA {:.2} AvgG {:.2}  ({:.0}s)",
            easy.ua, easy.ra, easy.ta, easy.mia, easy.avg_gap,
            hard.ua, hard.ra, hard.ta, hard.mia, hard.avg_gap,
            t0.elapsed().as_secs_f64()
        );
    }
}
