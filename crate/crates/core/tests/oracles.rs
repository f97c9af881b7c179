mod common;

use cloakbd::poison::PoisonMode;
use common::*;

#[test]
fn metrics_agree_with_references() {
    let s = metric_oracles(150, 1);
    assert_eq!(s.instances, 150);
    assert!(s.failures.is_empty(), "{:?}", s.failures);
}

#[test]
fn rpn_assignment_agrees_with_exhaustive_labels() {
    let s = rpn_assignment_oracle(20, 3);
    assert!(s.failures.is_empty(), "{:?}", s.failures);
}

#[test]
fn omitted_trigger_anchors_are_ordinary_negatives() {
    let c = omit_sampling_chi_square(PoisonMode::Omit, 200);
    assert!(c.p_value > 0.01, "{c:?}");
}

#[test]
fn flipped_trigger_anchors_are_always_sampled() {
    let c = omit_sampling_chi_square(PoisonMode::KeepAndFlip, 50);
    assert!(c.p_value < 1e-6, "{c:?}");
    assert!(c.trigger_rate > c.background_rate);
}

#[test]
fn every_loss_passes_grad_check() {
    for (name, r) in gradient_suite() {
        assert!(r.checked > 0, "{name}");
        assert!(r.max_rel_error <= 1e-4, "{name}: {r:?}");
    }
}
