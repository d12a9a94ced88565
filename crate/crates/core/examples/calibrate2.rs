use unlearn_core::dataset::synthetic_rgb10;
use unlearn_core::engine::run_unlearning_classifier;
use unlearn_core::evaluation::evaluate_classifier;
use unlearn_core::models::classifier::{train_classifier, TrainConfig};
use unlearn_core::models::ClassifierArch;
use unlearn_core::objectives::{OptimizerKind, TaskKind, UnlearnMethod, UnlearnRecipe};
use unlearn_core::splits::{make_classwise_forget_split, make_random_forget_split};
use unlearn_core::weighting::{WeightVariant, WeightingConfig};

fn main() {
    let d = synthetic_rgb10(5000, 1000, 42);
    for seed in [0u64, 1, 2] {
        let cfg = TrainConfig {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 256,
            seed,
            arch: ClassifierArch::SmallCnn,
        };
        let (ckpt, _) = train_classifier(&d.train_view(), &cfg).unwrap();
        let split = make_random_forget_split(&d, 0.10, seed).unwrap();
        let (retr, _) = train_classifier(
            &d.view(split.retain.clone()),
            &TrainConfig { seed: seed + 100, ..cfg.clone() },
        )
        .unwrap();

        for (lr, tau, epochs) in [(0.006, 1.0, 8), (0.008, 1.0, 8), (0.008, 2.0, 8)] {
            let mut tows = Vec::new();
            for w in [
                WeightingConfig::off(),
                WeightingConfig { tau, variant: WeightVariant::Dynamic },
            ] {
                let recipe = UnlearnRecipe {
                    method: UnlearnMethod::Gar,
                    alpha: 1.0,
                    weighting: w,
                    epochs,
                    lr,
                    batch_size: 256,
                    mask_fraction: 0.5,
                    seed: seed + 10,
                    task: TaskKind::Classifier,
                    redraw_labels_per_step: true,
                    momentum: 0.0,
                    optimizer: OptimizerKind::Sgd,
                };
                let (u, run) = run_unlearning_classifier(&ckpt, &d, &split, &recipe, None).unwrap();
                let rep = evaluate_classifier(&u, &retr, &d, &split, Some(&run)).unwrap();
                tows.push((rep.tow, rep.ua, rep.ra, rep.avg_gap));
            }
            println!(
                "seed {seed} lr {lr} tau {tau}: GAR tow {:.2} (ua {:.2} ra {:.2} g {:.2}) | +LoReUnD tow {:.2} (ua {:.2} ra {:.2} g {:.2}) | diff {:+.2}",
                tows[0].0, tows[0].1, tows[0].2, tows[0].3,
                tows[1].0, tows[1].1, tows[1].2, tows[1].3,
                tows[1].0 - tows[0].0
            );
        }

        // classwise RL trajectories
        let csplit = make_classwise_forget_split(&d, 3).unwrap();
        let mut trajs = Vec::new();
        for w in [
            WeightingConfig::off(),
            WeightingConfig { tau: 50.0, variant: WeightVariant::Dynamic },
        ] {
            let recipe = UnlearnRecipe {
                method: UnlearnMethod::Rl,
                alpha: 1.0,
                weighting: w,
                epochs: 8,
                lr: 0.01,
                batch_size: 256,
                mask_fraction: 0.5,
                seed: seed + 20,
                task: TaskKind::Classifier,
                redraw_labels_per_step: true,
                momentum: 0.0,
                optimizer: OptimizerKind::Sgd,
            };
            let (_, run) = run_unlearning_classifier(&ckpt, &d, &csplit, &recipe, None).unwrap();
            trajs.push(
                run.trajectory
                    .iter()
                    .map(|t| t.ua.unwrap())
                    .collect::<Vec<f64>>(),
            );
        }
        let ok = (2..8).all(|e| trajs[1][e] <= trajs[0][e]);
        println!(
            "seed {seed} classwise RL  : {:?}\nseed {seed} classwise +LRU: {:?}  (<= from epoch 2: {ok})",
            trajs[0].iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>(),
            trajs[1].iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
        );
    }
}
