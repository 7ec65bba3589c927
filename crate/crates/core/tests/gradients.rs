//! Analytic gradients against central finite differences.

mod common;

use common::grad;
use common::TOLERANCE;

fn check(results: Vec<(String, f64)>) {
    assert!(!results.is_empty());
    for (name, err) in results {
        assert!(err < TOLERANCE, "{name}: relative error {err:e}");
    }
}

#[test]
fn binary_primitives() {
    check(grad::binary_primitives());
}

#[test]
fn unary_primitives() {
    check(grad::unary_primitives());
}

#[test]
fn layer_norm_and_weighted_penalty() {
    check(grad::layer_norm_and_weighted_penalty());
}

#[test]
fn loss_functions() {
    check(grad::loss_functions());
}

#[test]
fn random_three_layer_graph() {
    check(grad::random_three_layer_graph());
}

#[test]
fn backbone_sum_of_output() {
    check(grad::backbone_sum_of_output());
}

#[test]
fn task_attention_and_head() {
    check(grad::task_attention_and_head());
}

#[test]
fn full_model_objective() {
    check(grad::full_model_objective());
}

#[test]
fn full_model_objective_dual_image() {
    check(grad::full_model_objective_dual_image());
}
