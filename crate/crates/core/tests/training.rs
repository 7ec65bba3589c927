//! Training-loop invariants on small models.

mod common;

use common::{plan_from, small_config, small_plan, small_task};
use tamcl::autodiff::ParamStore;
use tamcl::data::TaskSpec;
use tamcl::losses::{ikd_value, KdGranularity};
use tamcl::trainer::{run_sequence, ExperimentPlan, Method, Trainer};

fn trainer_for(plan: &ExperimentPlan, method: Method) -> Trainer {
    Trainer::new(small_config(method), plan.geometry().unwrap()).unwrap()
}

fn train_one(trainer: &mut Trainer, plan: &ExperimentPlan, i: usize) {
    let t = &plan.tasks[i];
    trainer.begin_task(t.info(), None).unwrap();
    trainer.train_task(&t.train, 1).unwrap();
    trainer.end_task(&t.train).unwrap();
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn names(store: &ParamStore, prefixes: &[&str]) -> Vec<String> {
    store
        .iter()
        .map(|(_, p)| p.name.clone())
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect()
}

#[test]
fn first_task_total_is_cross_entropy() {
    let plan = small_plan(24);
    let mut trainer = trainer_for(&plan, Method::Tamcl);
    train_one(&mut trainer, &plan, 0);
    assert!(!trainer.step_log().is_empty());
    for s in trainer.step_log() {
        assert_eq!(s.loss.lambda, 0.0);
        assert_eq!(s.loss.l_div, 0.0);
        assert!((s.loss.total - s.loss.l_c).abs() <= 1e-12, "{:?}", s.loss);
    }
}

#[test]
fn earlier_tokens_and_heads_stay_frozen() {
    let plan = small_plan(24);
    let mut trainer = trainer_for(&plan, Method::Tamcl);
    train_one(&mut trainer, &plan, 0);
    let after_first = trainer.model().store().clone();
    train_one(&mut trainer, &plan, 1);
    let after_second = trainer.model().store().clone();
    train_one(&mut trainer, &plan, 2);
    let store = trainer.model().store();

    let first = names(&after_first, &["tokens.0", "heads.0."]);
    let second = names(&after_second, &["tokens.1", "heads.1."]);
    assert_eq!(first.len(), 3);
    assert_eq!(second.len(), 3);
    assert!(store.values_bit_eq(&after_first, &refs(&first)));
    assert!(store.values_bit_eq(&after_second, &refs(&second)));
    // the shared backbone did move
    assert!(!store.values_bit_eq(&after_first, &["backbone.text.table"]));
    assert!(!store.values_bit_eq(&after_second, &["tab.wq"]));
}

#[test]
fn teacher_is_the_snapshot_at_begin_task() {
    let plan = small_plan(24);
    let mut trainer = trainer_for(&plan, Method::Tamcl);
    train_one(&mut trainer, &plan, 0);
    let before = trainer.model().store().clone();
    let task = &plan.tasks[1];
    trainer.begin_task(task.info(), None).unwrap();

    let all: Vec<String> = before.iter().map(|(_, p)| p.name.clone()).collect();
    let all_refs: Vec<&str> = all.iter().map(String::as_str).collect();
    let teacher = trainer.teacher().expect("distillation keeps a teacher").clone();
    assert_eq!(teacher.store().len(), before.len());
    assert!(teacher.store().values_bit_eq(&before, &all_refs));

    // teacher and student agree before any step: zero distillation loss
    for s in &task.train.samples[..4] {
        let t = teacher.backbone_forward(s).unwrap();
        let m = trainer.model().backbone_forward(s).unwrap();
        for (a, b) in t.iter().zip(&m) {
            assert_eq!(ikd_value(b, a, KdGranularity::PerPosition).unwrap(), 0.0);
            assert_eq!(ikd_value(b, a, KdGranularity::Flattened).unwrap(), 0.0);
        }
    }

    trainer.train_task(&task.train, 1).unwrap();
    let during = trainer.teacher().unwrap();
    assert!(during.store().values_bit_eq(&before, &all_refs));
    assert!(!trainer.model().store().values_bit_eq(&before, &all_refs));
    trainer.end_task(&task.train).unwrap();
    assert!(trainer.teacher().is_none());
}

#[test]
fn loss_weights_on_every_step() {
    let plan = small_plan(48);
    let mut trainer = trainer_for(&plan, Method::Tamcl);
    for i in 0..3 {
        train_one(&mut trainer, &plan, i);
    }
    for s in trainer.step_log() {
        let b = &s.loss;
        assert!(b.beta <= b.l_div && b.beta <= b.beta_cap() + 1e-12, "{b:?}");
        assert!((b.weighted_sum() - b.total).abs() <= 1e-12 * b.total.abs().max(1.0), "{b:?}");
        assert!(b.l_ikd >= 0.0, "{b:?}");
    }
    assert!(trainer.step_log().iter().any(|s| s.loss.beta > 0.0));
    // the first step of each later task starts from the teacher itself
    for task in 1..3 {
        let first = trainer.step_log().iter().find(|s| s.task == task).unwrap();
        assert_eq!(first.loss.l_ikd, 0.0);
    }
}

fn replay_plan(train: usize) -> ExperimentPlan {
    let spec = |name: &str, labels: usize, seed: u64| TaskSpec {
        train_samples: train,
        test_samples: 8,
        ..small_task(name, labels, seed, false)
    };
    plan_from(&[spec("r0", 2, 1), spec("r1", 3, 2)], 3)
}

#[test]
fn replay_fires_twice_per_epoch_of_250_steps() {
    let plan = replay_plan(1000);
    let mut config = small_config(Method::Er);
    config.model.hidden = 4;
    config.model.heads = 1;
    config.model.mlp_ratio = 1;
    assert_eq!(config.replay.frequency, 100);
    assert_eq!(config.replay.sample_pct, 0.01);
    let mut trainer = Trainer::new(config, plan.geometry().unwrap()).unwrap();

    let first = &plan.tasks[0];
    trainer.begin_task(first.info(), None).unwrap();
    let curve = trainer.train_task(&first.train, 1).unwrap();
    assert_eq!(curve.steps_per_epoch, 250);
    assert_eq!(curve.replay_steps, 0, "nothing stored yet");
    trainer.end_task(&first.train).unwrap();
    assert_eq!(trainer.buffer().store(0).unwrap().len(), 10);

    let second = &plan.tasks[1];
    trainer.begin_task(second.info(), None).unwrap();
    let curve = trainer.train_task(&second.train, 2).unwrap();
    assert_eq!(curve.steps_per_epoch, 250);
    assert_eq!(curve.replay_steps, 4);
    assert_eq!(curve.totals.len(), 2 * (250 + 2));
    let replays: Vec<_> = trainer.step_log().iter().filter(|s| s.replay).collect();
    assert_eq!(replays.len(), 4);
    assert!(replays.iter().all(|s| s.batch_task == 0 && s.task == 1));
    trainer.end_task(&second.train).unwrap();
    assert_eq!(trainer.buffer().store(1).unwrap().len(), 10);
    assert_eq!(trainer.buffer().len(), 20);
}

#[test]
fn small_tasks_still_store_one_sample() {
    let plan = replay_plan(40);
    let mut trainer = trainer_for(&plan, Method::Er);
    train_one(&mut trainer, &plan, 0);
    assert_eq!(trainer.buffer().store(0).unwrap().len(), 1);
}

#[test]
fn method_components() {
    let plan = small_plan(24);
    for method in [Method::Finetune, Method::Ewc, Method::Er, Method::Tamcl] {
        let mut trainer = trainer_for(&plan, method);
        train_one(&mut trainer, &plan, 0);
        trainer.begin_task(plan.tasks[1].info(), None).unwrap();
        let f = trainer.flags();
        assert_eq!(trainer.teacher().is_some(), method == Method::Tamcl, "{method}");
        assert_eq!(!trainer.buffer().is_empty(), f.replay, "{method}");
        assert_eq!(!trainer.fisher_states().is_empty(), method == Method::Ewc, "{method}");
        assert_eq!(trainer.model().tokens().len(), if f.use_tab { 2 } else { 0 });
        let dims: Vec<usize> = trainer.model().heads().iter().map(|h| h.output_dim()).collect();
        let expected = if f.accumulate_heads { vec![3, 5] } else { vec![3, 2] };
        assert_eq!(dims, expected, "{method}");
        trainer.train_task(&plan.tasks[1].train, 1).unwrap();
        // the first step of a task sits exactly on the EWC anchor
        for s in trainer.step_log().iter().filter(|s| s.task == 1).skip(1) {
            assert_eq!(s.loss.ewc_penalty > 0.0, method == Method::Ewc, "{method} {:?}", s.loss);
            assert_eq!(s.loss.lambda > 0.0, method == Method::Tamcl, "{method}");
        }
    }
}

#[test]
fn ewc_penalty_is_zero_at_the_anchor() {
    let plan = small_plan(24);
    let mut trainer = trainer_for(&plan, Method::Ewc);
    train_one(&mut trainer, &plan, 0);
    let state = &trainer.fisher_states()[0];
    assert!(state.entries.iter().all(|e| e.fisher.data().iter().all(|&v| v >= 0.0)));
    assert!(state.entries.iter().any(|e| e.fisher.data().iter().any(|&v| v > 0.0)));
    trainer.begin_task(plan.tasks[1].info(), None).unwrap();
    assert_eq!(
        tamcl::trainer::ewc_penalty(trainer.model(), trainer.fisher_states()).unwrap(),
        0.0
    );
}

#[test]
fn same_seed_same_result_bytes() {
    let plan = small_plan(16);
    let config = small_config(Method::Tamcl);
    let a = serde_json::to_string(&run_sequence(&plan, &config).unwrap()).unwrap();
    let b = serde_json::to_string(&run_sequence(&plan, &config).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = small_config(Method::Tamcl);
    let c = serde_json::to_string(&run_sequence(&plan, &tamcl::trainer::TrainConfig { seed: 1, ..other }).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn result_shapes_follow_the_plan() {
    let plan = small_plan(16);
    let r = run_sequence(&plan, &small_config(Method::Finetune)).unwrap();
    assert_eq!(r.accuracy.len(), 3);
    for (i, row) in r.accuracy.rows.iter().enumerate() {
        assert_eq!(row.len(), i + 1);
    }
    assert_eq!(r.forgetting.entries.len(), 3);
    assert_eq!(r.loss_curves.len(), 3);
    for c in &r.loss_curves {
        assert_eq!(c.totals.len(), c.epochs * c.steps_per_epoch + c.replay_steps);
    }
}
