//! Shared helpers: finite-difference gradient checks and small task suites.
#![allow(dead_code)]

pub mod grad;

use tamcl::autodiff::{ParamStore, Tape, Tensor, Var};
use tamcl::backbone::BackboneConfig;
use tamcl::data::{generate_task, SuiteSpec, TaskSpec};
use tamcl::trainer::{ExperimentPlan, Method, PlannedTask, TrainConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, 1e-4)`. The floor keeps gradients that are
/// zero up to truncation error from dividing by nothing.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Worst relative error over every entry of every input.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let eval = |inputs: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        let l = f(&mut t, &vars);
        t.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[i]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        for k in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[k], numeric));
        }
    }
    worst
}

/// Worst relative error over up to `per_param` evenly spaced entries of
/// every trainable parameter, with the parameter's name.
pub fn check_params(
    store: &mut ParamStore,
    per_param: usize,
    f: impl Fn(&mut Tape, &ParamStore) -> Var,
) -> (f64, String) {
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    tape.backward_into(loss, store).expect("scalar loss");
    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let l = f(&mut t, store);
        t.value(l).item()
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let n = store.get(id).value.len();
        let analytic = store.get(id).grad.clone().expect("trainable parameter has a gradient");
        let stride = (n / per_param.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + STEP;
            let up = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - STEP;
            let down = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let e = rel_err(analytic.data()[k], (up - down) / (2.0 * STEP));
            if e > worst.0 {
                worst = (e, format!("{}[{k}]", store.get(id).name));
            }
        }
    }
    worst
}

/// Small geometry that still exercises every code path: 8×8 images, patch 4,
/// short texts.
pub fn small_task(name: &str, labels: usize, class_seed: u64, dual: bool) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        label_count: labels,
        image_height: 8,
        image_width: 8,
        channels: 1,
        patch_size: 4,
        vocab_size: 32,
        text_len_min: 1,
        text_len_max: 4,
        dual_image: dual,
        train_samples: 24,
        test_samples: 12,
        class_seed,
        concepts: 8,
        world_seed: 7,
        noise: 0.5,
        domain_shift: 0.0,
        token_purity: 0.9,
    }
}

/// Three small tasks: 3 labels, 2 labels with two images, 4 labels.
pub fn small_plan(train_samples: usize) -> ExperimentPlan {
    let specs = [
        small_task("a", 3, 1, false),
        small_task("b", 2, 2, true),
        small_task("c", 4, 3, false),
    ];
    plan_from(&specs.map(|s| TaskSpec { train_samples, ..s }), 5)
}

pub fn plan_from(specs: &[TaskSpec], seed: u64) -> ExperimentPlan {
    let tasks = specs
        .iter()
        .map(|s| {
            let (train, test) = generate_task(s, seed).unwrap();
            PlannedTask::new(train, test)
        })
        .collect();
    ExperimentPlan::new(tasks).unwrap()
}

/// A model small enough for many short runs.
pub fn small_config(method: Method) -> TrainConfig {
    let mut c = TrainConfig {
        method,
        model: BackboneConfig {
            depth: 1,
            hidden: 8,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
        },
        ..TrainConfig::default()
    };
    c.optimizer.lr = 1e-3;
    c.training.epochs = 1;
    c.training.batch_size = 4;
    c
}

/// The desk setup: default model, lr 1e-3, batch 4, 5 epochs.
pub fn desk_config(method: Method, seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        method,
        ..TrainConfig::default()
    };
    c.optimizer.lr = 1e-3;
    c
}

/// The first three tasks of the default suite.
pub fn desk_plan() -> ExperimentPlan {
    let suite = SuiteSpec::default_suite();
    plan_from(&suite.tasks[..3], suite.seed)
}
