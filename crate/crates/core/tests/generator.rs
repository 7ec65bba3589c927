//! Statistical checks on the synthetic suite: label balance, the need for
//! both modalities, and learnability of each task on its own.

mod common;

use common::{desk_config, plan_from};
use tamcl::data::{generate_task, Dataset, SuiteSpec, TaskSpec};
use tamcl::trainer::{evaluate, run_sequence, Method, Trainer};

#[test]
fn label_histograms_are_within_four_sigma() {
    let suite = SuiteSpec::default_suite();
    for spec in &suite.tasks {
        let (train, test) = generate_task(spec, suite.seed).unwrap();
        for d in [&train, &test] {
            let n = d.len() as f64;
            let p = 1.0 / spec.label_count as f64;
            let sigma = (n * p * (1.0 - p)).sqrt();
            for (k, &c) in d.label_histogram().iter().enumerate() {
                let z = (c as f64 - n * p).abs() / sigma;
                assert!(z <= 4.0, "{} label {k}: count {c} is {z:.2}σ from {}", spec.name, n * p);
            }
        }
    }
}

fn xor_task() -> TaskSpec {
    TaskSpec {
        name: "xor".into(),
        label_count: 2,
        class_seed: 5,
        train_samples: 800,
        test_samples: 1000,
        ..SuiteSpec::default_suite().tasks[0].clone()
    }
}

fn without_images(d: &Dataset) -> Dataset {
    let mut out = d.clone();
    for s in &mut out.samples {
        s.image.data.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// Trains a fresh single-task model on `train` until its training accuracy
/// stops improving and returns (train, test) accuracy.
fn fit(train: &Dataset, test: &Dataset) -> (f64, f64) {
    let plan = plan_from(&[train.spec.clone()], 0);
    let mut config = desk_config(Method::Finetune, 1);
    config.training.batch_size = 16;
    let mut trainer = Trainer::new(config, plan.geometry().unwrap()).unwrap();
    trainer.begin_task(plan.tasks[0].info(), None).unwrap();
    trainer.train_task(train, 15).unwrap();
    trainer.end_task(train).unwrap();
    (
        evaluate(trainer.model(), train, 0).unwrap(),
        evaluate(trainer.model(), test, 0).unwrap(),
    )
}

#[test]
fn one_modality_alone_scores_chance_under_xor() {
    let spec = xor_task();
    let (train, test) = generate_task(&spec, 99).unwrap();
    let chance = 0.5;
    let (fit_acc, blind) = fit(&train.without_text(), &test.without_text());
    assert!(blind <= chance + 0.05, "image-only accuracy {blind} (train {fit_acc})");
    let (fit_acc, deaf) = fit(&without_images(&train), &without_images(&test));
    assert!(deaf <= chance + 0.05, "text-only accuracy {deaf} (train {fit_acc})");
    // the same budget with both modalities learns the task
    let (_, both) = fit(&train, &test);
    assert!(both >= 0.9, "joint accuracy {both}");
}

#[test]
fn every_default_task_is_learnable_in_isolation() {
    let suite = SuiteSpec::default_suite();
    for spec in &suite.tasks {
        let mut plan = plan_from(std::slice::from_ref(spec), suite.seed);
        plan.tasks[0].epochs = Some(if spec.label_count >= 7 { 20 } else { 10 });
        let mut config = desk_config(Method::Tamcl, 0);
        config.training.batch_size = 16;
        let r = run_sequence(&plan, &config).unwrap();
        let acc = r.accuracy.get(0, 0).unwrap();
        println!("{}: {acc:.4}", spec.name);
        assert!(acc >= 0.90, "{} reaches only {acc}", spec.name);
    }
}
