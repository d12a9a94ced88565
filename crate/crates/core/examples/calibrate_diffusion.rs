use std::time::Instant;
use unlearn_core::dataset::synthetic_shapes10;
use unlearn_core::diffusion_eval::{
    build_reference_table_exhaustive, fit_reference_table,
};
use unlearn_core::engine::run_unlearning_diffusion;
use unlearn_core::evaluation::{accuracy, generation_ua, rte};
use unlearn_core::models::classifier::{train_classifier, TrainConfig};
use unlearn_core::models::diffusion::{train_diffusion, DiffusionTrainConfig};
use unlearn_core::models::ClassifierArch;
use unlearn_core::objectives::{TaskKind, UnlearnMethod, UnlearnRecipe};
use unlearn_core::splits::make_classwise_forget_split;
use unlearn_core::weighting::{WeightVariant, WeightingConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let t_max: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let unlearn_epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let unlearn_lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);

    let d = synthetic_shapes10(2000, 400, 16, 7);

    // external classifier
    let ccfg = TrainConfig {
        epochs: 15,
        lr: 0.05,
        momentum: 0.9,
        batch_size: 128,
        seed: 3,
        arch: ClassifierArch::SmallCnn,
    };
    let t0 = Instant::now();
    let (ext, _) = train_classifier(&d.train_view(), &ccfg).unwrap();
    println!(
        "external classifier in {:.0}s: train-acc {:.2} test-acc {:.2}",
        t0.elapsed().as_secs_f64(),
        accuracy(&ext.model, &d.train_view()).unwrap(),
        accuracy(&ext.model, &d.test_view()).unwrap()
    );

    // DDPM pretrain
    let dcfg = DiffusionTrainConfig {
        steps,
        batch_size: 64,
        lr: 2e-3,
        seed: 1,
        t_max,
        base_channels: 16,
        emb_dim: 64,
        null_drop: 0.10,
    };
    let t0 = Instant::now();
    let (ddpm, log) = train_diffusion(&d.train_view(), &dcfg).unwrap();
    println!(
        "ddpm {} steps in {:.0}s, loss {:.4} -> {:.4}",
        steps,
        t0.elapsed().as_secs_f64(),
        log.first().unwrap().loss,
        log.last().unwrap().loss
    );

    // generation quality per class before unlearning
    let t0 = Instant::now();
    for class in [3usize, 7] {
        let ua = generation_ua(&ddpm.model, class, &ext.model, 64, 2.0, 11).unwrap();
        println!("pre-unlearn generation_ua(class {class}) = {ua:.1}");
    }
    println!("sampling took {:.0}s", t0.elapsed().as_secs_f64());

    // reference tables: fitted vs exhaustive on the forget class view
    let split = make_classwise_forget_split(&d, 3).unwrap();
    let fv = d.view(split.forget.clone());
    let sub = d.view(split.forget[..200.min(split.forget.len())].to_vec());
    let t0 = Instant::now();
    let ex = build_reference_table_exhaustive(&ddpm.model, &sub, 5).unwrap();
    println!("exhaustive table (200 x {t_max}) in {:.0}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let fit = fit_reference_table(&ddpm.model, &sub, 50, 10, 5).unwrap();
    println!(
        "fitted table in {:.0}s, source {:?}, params {:?}",
        t0.elapsed().as_secs_f64(),
        fit.source,
        fit.fit_params
    );
    let mut max_rel: f64 = 0.0;
    for t in 1..=t_max {
        let rel = (fit.mean(t) - ex.mean(t)).abs() / ex.mean(t);
        max_rel = max_rel.max(rel);
    }
    println!("fitted vs exhaustive: max pointwise rel err {:.3}", max_rel);
    println!(
        "m(1) {:.3} m(T/2) {:.3} m(T) {:.3}",
        ex.mean(1),
        ex.mean(t_max / 2),
        ex.mean(t_max)
    );

    // unlearning with and without dynamic weighting
    let table = fit_reference_table(&ddpm.model, &fv, 50.min(fv.len()), 10, 6).unwrap();
    for (label, weighting) in [
        ("baseline ", WeightingConfig::off()),
        ("loreun-d ", WeightingConfig { tau: 1.0, variant: WeightVariant::Dynamic }),
    ] {
        let recipe = UnlearnRecipe {
            method: UnlearnMethod::Rl,
            alpha: 1.0,
            weighting,
            epochs: unlearn_epochs,
            lr: unlearn_lr,
            batch_size: 64,
            mask_fraction: 0.5,
            seed: 17,
            task: TaskKind::Diffusion,
            redraw_labels_per_step: true,
            momentum: 0.0,
            optimizer: unlearn_core::objectives::OptimizerKind::Adam,
        };
        let t0 = Instant::now();
        let (unlearned, run) =
            run_unlearning_diffusion(&ddpm, &d, &split, &recipe, None, Some(&table)).unwrap();
        let ua_f = generation_ua(&unlearned.model, 3, &ext.model, 64, 2.0, 23).unwrap();
        let ua_r = generation_ua(&unlearned.model, 7, &ext.model, 64, 2.0, 23).unwrap();
        println!(
            "{label}: forgotten-class ua {:.1}, retained-class ua {:.1}, rte {:.2} min ({:.0}s wall)",
            ua_f,
            ua_r,
            rte(&run),
            t0.elapsed().as_secs_f64()
        );
    }
}
