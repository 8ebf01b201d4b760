mod common;

use common::grad::{contrastive_case, mapping_case, model_case, orthogonal_case, GradCheck, TOLERANCE};
use mixhic::model::{InputMode, Task};

fn assert_close(name: &str, c: GradCheck) {
    assert!(c.coordinates > 0, "{name}: nothing checked");
    assert!(
        c.max_relative_error <= TOLERANCE,
        "{name}: max relative error {:.3e} over {} coordinates",
        c.max_relative_error,
        c.coordinates
    );
}

#[test]
fn contrastive_gradients() {
    for seed in 0..3 {
        assert_close("contrastive", contrastive_case(seed).unwrap());
    }
}

#[test]
fn orthogonal_gradients() {
    for seed in 0..3 {
        assert_close("orthogonal", orthogonal_case(seed).unwrap());
    }
}

#[test]
fn mapping_gradients() {
    for seed in 0..3 {
        assert_close("mapping", mapping_case(seed).unwrap());
    }
}

#[test]
fn pretraining_objective_gradients() {
    assert_close("pretraining", model_case(Task::None, InputMode::Bimodal, 1).unwrap());
}

#[test]
fn loop_head_gradients() {
    assert_close("loop bimodal", model_case(Task::Loop, InputMode::Bimodal, 2).unwrap());
    assert_close("loop track-only", model_case(Task::Loop, InputMode::TrackOnly, 2).unwrap());
}

#[test]
fn cage_head_gradients() {
    assert_close("cage bimodal", model_case(Task::Cage, InputMode::Bimodal, 3).unwrap());
}

#[test]
fn contact_head_gradients() {
    assert_close("contact infer", model_case(Task::Contact, InputMode::InferMissingHic, 4).unwrap());
}
