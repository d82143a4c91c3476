mod common;

use common::oracle::*;
use common::*;
use pdf_core::{pdf_loss, KlGate, LossSettings, PerturbationHead};

#[test]
fn analytic_gradient_matches_finite_differences() {
    for seed in 0..50 {
        let err = max_error(&instance(seed));
        assert!(err < 1e-4, "instance {seed}: relative error {err:e}");
    }
}

#[test]
fn gradient_matches_with_gate_forced_and_reinforce_removed() {
    for seed in 100..120 {
        let mut inst = instance(seed);
        inst.settings.gate = KlGate::Open;
        inst.settings.reinforce_weight = 0.0;
        inst.settings.lambda_kl = 0.7;
        assert!(max_error(&inst) < 1e-4);
        inst.settings.gate = KlGate::Closed;
        inst.settings.reinforce_weight = 1.0;
        assert!(max_error(&inst) < 1e-4);
    }
}

#[test]
fn closed_gate_gives_pure_reinforce_gradient() {
    for seed in 200..260 {
        let mut inst = instance(seed);
        if inst.r > inst.b {
            std::mem::swap(&mut inst.r, &mut inst.b);
        }
        let (value, grad) = pdf_loss(&inst.head, &inst.base, &inst.feature, &inst.action, inst.r, inst.b, &inst.settings).unwrap();
        assert_eq!(value.kl, 0.0);
        let plain = LossSettings {
            lambda_kl: 0.0,
            ..inst.settings
        };
        let (plain_value, plain_grad) =
            pdf_loss(&inst.head, &inst.base, &inst.feature, &inst.action, inst.r, inst.b, &plain).unwrap();
        assert_eq!(value.total.to_bits(), plain_value.total.to_bits());
        assert_eq!(grad.to_vec(), plain_grad.to_vec());
    }
}

#[test]
fn equal_feedback_and_baseline_gives_exact_zero_gradient() {
    for seed in 300..320 {
        let inst = instance(seed);
        let (value, grad) =
            pdf_loss(&inst.head, &inst.base, &inst.feature, &inst.action, 0.4, 0.4, &inst.settings).unwrap();
        assert_eq!(value.total, 0.0);
        assert!(grad.is_zero());
    }
}

#[test]
fn open_gate_at_zero_perturbation_has_zero_kl_gradient() {
    // A fresh head outputs zero, so pi~ = pi and the KL term is at its minimum.
    let mut rng = rng(7);
    let head = PerturbationHead::new(6, 5, 2, 4, 3);
    let base = random_logits(&mut rng, 2, 4, 1.0);
    let feature = random_feature(&mut rng, 6);
    let action = random_action(&mut rng, 2, 4);
    let s = LossSettings {
        lambda: 1.0,
        lambda_kl: 1.0,
        reinforce_weight: 0.0,
        gate: KlGate::Open,
    };
    let (value, grad) = pdf_loss(&head, &base, &feature, &action, 1.0, 0.0, &s).unwrap();
    assert!(value.kl.abs() < 1e-15);
    assert!(grad.to_vec().iter().all(|g| g.abs() < 1e-15));
}
