//! Tape gradients against central finite differences through the full model.

#[path = "support/gradcheck.rs"]
mod gradcheck;

use agp_core::backbone::BackboneMode;
use agp_core::diffcore::NormMode;
use gradcheck::{check, Instance, Shape, TOLERANCE};

fn assert_instance(shape: Shape, seed: u64) {
    let r = check(shape, seed);
    assert!(r.forward_gap < 1e-10, "forward mismatch {:e}", r.forward_gap);
    for leaf in &r.leaves {
        assert!(leaf.checked * 10 >= leaf.coordinates * 9, "{}: {} of {} coordinates smooth", leaf.name, leaf.checked, leaf.coordinates);
        assert!(leaf.max_rel_error <= TOLERANCE, "{}: relative error {:e}", leaf.name, leaf.max_rel_error);
    }
}

fn shape(mode: BackboneMode, prompt_norm: NormMode, layers: usize) -> Shape {
    Shape { nodes: 8, layers, features: 4, hidden: 6, bottleneck: 3, mode, prompt_norm }
}

#[test]
fn gradients_match_with_frozen_statistics() {
    for seed in [1, 2, 3] {
        assert_instance(shape(BackboneMode::Full, NormMode::Eval, 2), seed);
    }
}

#[test]
fn gradients_match_with_batch_statistics() {
    for seed in [4, 5] {
        assert_instance(shape(BackboneMode::Full, NormMode::Train, 3), seed);
    }
}

#[test]
fn gradients_match_on_the_linear_encoder() {
    assert_instance(shape(BackboneMode::Linear, NormMode::Train, 3), 6);
}

#[test]
fn gradients_match_on_random_shapes() {
    for seed in 0..10 {
        let r = check(Shape::random(100 + seed, 10, 3), 100 + seed);
        assert!(r.max_rel_error() <= TOLERANCE, "{:?}: {:e}", r.shape, r.max_rel_error());
    }
}

#[test]
fn every_leaf_receives_gradient() {
    let r = check(shape(BackboneMode::Full, NormMode::Eval, 2), 7);
    for leaf in &r.leaves {
        assert!(leaf.max_abs_gradient > 1e-6, "{} gradient vanished", leaf.name);
    }
}

#[test]
fn edge_gradient_vanishes_on_the_diagonal() {
    let inst = Instance::new(shape(BackboneMode::Full, NormMode::Eval, 2), 9);
    let (_, grads) = inst.tape_loss(&inst.leaves);
    for i in 0..inst.graph.n() {
        assert_eq!(grads[1].get(i, i), 0.0);
    }
}
