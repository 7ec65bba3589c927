//! Finite-difference checks shared by the gradient and acceptance tests.
//! Each check returns `(what, worst relative error)` pairs.
#![allow(dead_code)]

use super::{check_inputs, check_params};
use tamcl::autodiff::{ParamStore, Tape, Tensor, Var};
use tamcl::backbone::{Backbone, BackboneConfig, InputGeometry};
use tamcl::data::{Image, Sample};
use tamcl::losses::{cross_entropy, div_loss, ikd_loss, total_loss, KdGranularity, LossWeights};
use tamcl::model::{ModelConfig, TamClModel, TaskInfo};
use tamcl::rng::{normal_tensor, seeded, Rng};
use tamcl::task_attention::{ClassifierHead, TaskAttentionBlock, TaskToken};

fn push(out: &mut Vec<(String, f64)>, name: &str, err: f64) {
    out.push((name.to_string(), err));
}

fn rng(seed: u64) -> Rng {
    seeded(seed, 99)
}

fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    normal_tensor(rng, &[rows, cols], 1.0)
}

/// `Σ out ⊙ W` for a fixed random `W`, so every output entry matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let w = tape.constant(randn(&mut rng(seed), r, c));
    let m = tape.mul(out, w).unwrap();
    tape.sum(m)
}

pub fn binary_primitives() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(1);
    let (a, b) = (randn(&mut r, 3, 5), randn(&mut r, 3, 5));
    let c = randn(&mut r, 5, 4);
    let d = randn(&mut r, 6, 5);
    let row = randn(&mut r, 1, 5);

    push(&mut out, "matmul", check_inputs(&[a.clone(), c], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, 10)
    }));
    push(&mut out, "matmul_t", check_inputs(&[a.clone(), d], |t, v| {
        let y = t.matmul_t(v[0], v[1]).unwrap();
        project(t, y, 11)
    }));
    push(&mut out, "add", check_inputs(&[a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 12)
    }));
    push(&mut out, "sub", check_inputs(&[a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y, 13)
    }));
    push(&mut out, "mul", check_inputs(&[a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 14)
    }));
    push(&mut out, "add_n", check_inputs(&[a.clone(), b.clone(), a.clone()], |t, v| {
        let y = t.add_n(v).unwrap();
        project(t, y, 15)
    }));
    push(&mut out, "add_row", check_inputs(&[a.clone(), row], |t, v| {
        let y = t.add_row(v[0], v[1]).unwrap();
        project(t, y, 16)
    }));
    push(&mut out, "interleave", check_inputs(&[a.clone(), b.clone()], |t, v| {
        let y = t.interleave(v[0], v[1]).unwrap();
        project(t, y, 17)
    }));
    push(&mut out, "concat_rows", check_inputs(&[a.clone(), b.clone()], |t, v| {
        let y = t.concat_rows(v).unwrap();
        project(t, y, 18)
    }));
    push(&mut out, "concat_cols", check_inputs(&[a, b], |t, v| {
        let y = t.concat_cols(v).unwrap();
        project(t, y, 19)
    }));
    out
}

pub fn unary_primitives() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(2);
    let x = randn(&mut r, 4, 6);
    let mut one = |name: &str, seed: u64, op: &dyn Fn(&mut Tape, Var) -> Var| {
        push(&mut out, name, check_inputs(&[x.clone()], |t, v| {
            let y = op(t, v[0]);
            project(t, y, seed)
        }));
    };
    one("scale", 20, &|t, a| t.scale(a, -1.7));
    one("reshape", 21, &|t, a| t.reshape(a, 3, 8).unwrap());
    one("gelu", 22, &|t, a| t.gelu(a));
    one("softmax_rows", 23, &|t, a| t.softmax_rows(a).unwrap());
    one("log_softmax_rows", 24, &|t, a| t.log_softmax_rows(a).unwrap());
    one("slice_rows", 25, &|t, a| t.slice_rows(a, 1, 2).unwrap());
    one("slice_cols", 26, &|t, a| t.slice_cols(a, 2, 3).unwrap());
    one("pair_mean", 27, &|t, a| t.pair_mean(a).unwrap());
    one("gather", 28, &|t, a| t.gather(a, &[3, 0, 3, 1]).unwrap());
    one("sum", 29, &|t, a| {
        let s = t.sum(a);
        let sq = t.mul(s, s).unwrap();
        t.reshape(sq, 1, 1).unwrap()
    });
    one("mean", 30, &|t, a| {
        let m = t.mean(a).unwrap();
        t.mul(m, m).unwrap()
    });
    one("pick", 31, &|t, a| {
        let p = t.pick(a, 2, 5).unwrap();
        let g = t.gelu(p);
        t.mul(g, p).unwrap()
    });
    out
}

pub fn layer_norm_and_weighted_penalty() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(3);
    let x = randn(&mut r, 5, 7);
    let gamma = randn(&mut r, 1, 7);
    let beta = randn(&mut r, 1, 7);
    push(&mut out, "layer_norm_rows", check_inputs(&[x.clone(), gamma, beta], |t, v| {
        let y = t.layer_norm_rows(v[0], v[1], v[2], 1e-6).unwrap();
        project(t, y, 32)
    }));

    let anchor = randn(&mut r, 5, 7);
    let weight = normal_tensor(&mut r, &[5, 7], 1.0);
    let weight = Tensor::new(vec![5, 7], weight.data().iter().map(|w| w.abs()).collect()).unwrap();
    push(&mut out, "weighted_sq_diff", check_inputs(&[x], |t, v| t.weighted_sq_diff(v[0], &anchor, &weight).unwrap()));
    out
}

pub fn loss_functions() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(4);
    let logits: Vec<Tensor> = (0..3).map(|_| randn(&mut r, 1, 5)).collect();
    push(&mut out, "cross_entropy", check_inputs(&logits, |t, v| cross_entropy(t, v, &[0, 4, 2]).unwrap()));

    let students: Vec<Tensor> = (0..2).map(|_| randn(&mut r, 4, 6)).collect();
    let teachers: Vec<Tensor> = (0..2).map(|_| randn(&mut r, 4, 6)).collect();
    for g in [KdGranularity::PerPosition, KdGranularity::Flattened] {
        push(&mut out, "ikd_loss", check_inputs(&students, |t, v| ikd_loss(t, v, &teachers, g).unwrap()));
    }

    let previous: Vec<Tensor> = (0..3).map(|_| randn(&mut r, 1, 6)).collect();
    push(&mut out, "div_loss", check_inputs(&[randn(&mut r, 1, 6)], |t, v| div_loss(t, v[0], &previous).unwrap()));
    out
}

pub fn random_three_layer_graph() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(5);
    let inputs = vec![randn(&mut r, 4, 6), randn(&mut r, 6, 8), randn(&mut r, 8, 8), randn(&mut r, 8, 3)];
    push(&mut out, "three layers", check_inputs(&inputs, |t, v| {
        let h1 = t.matmul(v[0], v[1]).unwrap();
        let h1 = t.gelu(h1);
        let h2 = t.matmul(h1, v[2]).unwrap();
        let h2 = t.softmax_rows(h2).unwrap();
        let out = t.matmul(h2, v[3]).unwrap();
        let r0 = t.slice_rows(out, 0, 1).unwrap();
        let r1 = t.slice_rows(out, 1, 1).unwrap();
        cross_entropy(t, &[r0, r1], &[2, 0]).unwrap()
    }));
    out
}

fn desk_geometry() -> InputGeometry {
    InputGeometry {
        image_height: 16,
        image_width: 16,
        channels: 1,
        vocab_size: 64,
        max_text_len: 8,
    }
}

fn random_sample(r: &mut Rng, dual: bool, label: u32) -> Sample {
    let image = |r: &mut Rng| Image::new(16, 16, 1, normal_tensor(r, &[256], 1.0).into_data()).unwrap();
    Sample {
        image: image(r),
        second_image: dual.then(|| image(r)),
        tokens: vec![3, 17, 1, 63],
        label,
    }
}

pub fn backbone_sum_of_output() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut store = ParamStore::new();
    let config = BackboneConfig::default();
    let backbone = Backbone::new(&config, &desk_geometry(), &mut store, &mut rng(6)).unwrap();
    let sample = random_sample(&mut rng(7), false, 0);
    let (err, at) = check_params(&mut store, 12, |tape, store| {
        let enc = backbone.forward(tape, store, &sample.image, &sample.tokens).unwrap();
        tape.sum(enc.output)
    });
    out.push((format!("backbone parameters (worst at {at})"), err));
    out
}

pub fn task_attention_and_head() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut store = ParamStore::new();
    let mut r = rng(8);
    let tab = TaskAttentionBlock::new(&mut store, 32, 2, 2, &mut r).unwrap();
    let token = TaskToken::new(&mut store, 0, 32, &mut r).unwrap();
    let head = ClassifierHead::new(&mut store, 0, 4, 0, 32, &mut r).unwrap();
    let seq = randn(&mut r, 9, 32);
    let (err, at) = check_params(&mut store, 16, |tape, store| {
        let s = tape.constant(seq.clone());
        let tau = tape.param(store, token.param);
        let out = tab.forward(tape, store, tau, Some(s)).unwrap();
        let logits = head.forward(tape, store, out.output).unwrap();
        cross_entropy(tape, &[logits], &[2]).unwrap()
    });
    out.push((format!("task attention parameters (worst at {at})"), err));

    // and with respect to the sequence itself
    push(&mut out, "tab input", check_inputs(&[seq], |tape, v| {
        let tau = tape.param(&store, token.param);
        let out = tab.forward(tape, &store, tau, Some(v[0])).unwrap();
        let logits = head.forward(tape, &store, out.output).unwrap();
        cross_entropy(tape, &[logits], &[1]).unwrap()
    }));
    out
}

/// Second task of a two-task model: cross-entropy, distillation against the
/// first task's snapshot and the diversity term, composed as in training.
fn full_objective_error(dual_second: bool) -> (f64, String) {
    let mut model = TamClModel::new(ModelConfig {
        backbone: BackboneConfig::default(),
        geometry: desk_geometry(),
        use_tab: true,
        accumulate_heads: true,
        seed: 3,
    })
    .unwrap();
    model
        .begin_task(TaskInfo {
            name: "first".into(),
            label_count: 3,
            dual_image: false,
        })
        .unwrap();
    model.end_task().unwrap();
    // move the student away from the teacher so the KL term is not flat
    for p in model.store_mut().iter_mut() {
        let mut r = seeded(p.name.len() as u64, 1);
        let noise = normal_tensor(&mut r, p.value.shape(), 0.05);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let teacher = model
        .begin_task(TaskInfo {
            name: "second".into(),
            label_count: 2,
            dual_image: dual_second,
        })
        .unwrap()
        .expect("teacher for the second task");
    let mut r = rng(9);
    let batch = [random_sample(&mut r, dual_second, 1), random_sample(&mut r, dual_second, 0)];
    let teachers: Vec<Tensor> = batch.iter().flat_map(|s| teacher.backbone_forward(s).unwrap()).collect();
    let previous = vec![model.store().value(model.tokens()[0].param).clone()];
    let token_id = model.tokens()[1].param;
    let weights = LossWeights::new(2, 50.0, true).unwrap();
    let targets: Vec<usize> = batch
        .iter()
        .map(|s| model.heads()[1].logit_index(s.label as usize).unwrap())
        .collect();

    let terms = |tape: &mut Tape, store: &ParamStore| {
        let mut m = model.clone();
        *m.store_mut() = store.clone();
        let mut logits = Vec::new();
        let mut reps = Vec::new();
        for s in &batch {
            let out = m.forward(tape, s, 1).unwrap();
            logits.push(out.logits);
            reps.extend(out.representations);
        }
        let l_c = cross_entropy(tape, &logits, &targets).unwrap();
        let l_ikd = ikd_loss(tape, &reps, &teachers, KdGranularity::PerPosition).unwrap();
        let tau = tape.param(store, token_id);
        let l_div = div_loss(tape, tau, &previous).unwrap();
        (l_c, l_ikd, l_div)
    };

    // β is a detached weight, so the numeric derivative must see it fixed.
    let mut tape = Tape::new();
    let (l_c, l_ikd, l_div) = terms(&mut tape, model.store());
    let (total, breakdown) = total_loss(&mut tape, l_c, Some(l_ikd), Some(l_div), &weights).unwrap();
    let beta = breakdown.beta;
    assert!(beta > 0.0);
    let lambda = weights.lambda;
    let manual = {
        let a = tape.scale(l_c, 1.0 - lambda);
        let b = tape.scale(l_ikd, lambda * weights.alpha);
        let c = tape.scale(l_div, beta);
        let ab = tape.add(a, b).unwrap();
        tape.add(ab, c).unwrap()
    };
    assert_eq!(tape.value(total).item(), tape.value(manual).item());

    let mut store = model.store().clone();
    check_params(&mut store, 10, |tape, store| {
        let (l_c, l_ikd, l_div) = terms(tape, store);
        let a = tape.scale(l_c, 1.0 - lambda);
        let b = tape.scale(l_ikd, lambda * weights.alpha);
        let c = tape.scale(l_div, beta);
        let ab = tape.add(a, b).unwrap();
        tape.add(ab, c).unwrap()
    })
}

pub fn full_model_objective() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let (err, at) = full_objective_error(false);
    out.push((format!("full objective (worst at {at})"), err));
    out
}

pub fn full_model_objective_dual_image() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let (err, at) = full_objective_error(true);
    out.push((format!("full objective, two images (worst at {at})"), err));
    out
}

/// Every check, in order.
pub fn all_checks() -> Vec<(String, f64)> {
    [
        binary_primitives,
        unary_primitives,
        layer_norm_and_weighted_penalty,
        loss_functions,
        random_three_layer_graph,
        backbone_sum_of_output,
        task_attention_and_head,
        full_model_objective,
        full_model_objective_dual_image,
    ]
    .iter()
    .flat_map(|f| f())
    .collect()
}
