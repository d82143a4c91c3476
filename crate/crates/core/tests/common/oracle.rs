use pdf_core::{pdf_loss, Action, Feature, KlGate, LogitsMatrix, LossSettings, PerturbationHead};
use rand::Rng;

use super::{random_action, random_feature, random_head, random_logits, rng};

/// Loss recomputed from scratch: explicit softmax, explicit sums.
pub fn oracle_loss(
    head: &PerturbationHead,
    base: &LogitsMatrix,
    feature: &Feature,
    a: &Action,
    r: f64,
    b: f64,
    s: &LossSettings,
) -> f64 {
    let delta = head.forward(feature).unwrap();
    let k = base.tokens();
    let mut reinforce = 0.0;
    let mut kl = 0.0;
    for d in 0..base.dims() {
        let z: Vec<f64> = (0..k).map(|j| base.row(d)[j] + s.lambda * delta[d * k + j]).collect();
        let norm = |v: &[f64]| -> Vec<f64> {
            let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
            let total: f64 = e.iter().sum();
            e.iter().map(|x| x / total).collect()
        };
        let p_tilde = norm(&z);
        let p = norm(base.row(d));
        reinforce += p_tilde[a.token(d)].ln();
        kl += (0..k).map(|j| p[j] * (p[j] / p_tilde[j]).ln()).sum::<f64>();
    }
    let gate = match s.gate {
        KlGate::Feedback => r > b,
        KlGate::Open => true,
        KlGate::Closed => false,
    };
    -s.reinforce_weight * (r - b) * reinforce + if gate { s.lambda_kl * kl } else { 0.0 }
}

/// Central differences over every head parameter. Weights are f32, so the
/// divisor is the step actually taken after rounding.
pub fn numeric_grad(
    head: &PerturbationHead,
    base: &LogitsMatrix,
    feature: &Feature,
    a: &Action,
    r: f64,
    b: f64,
    s: &LossSettings,
) -> Vec<f64> {
    let eps = 1e-4f32;
    let n = head.num_params();
    let mut out = Vec::with_capacity(n);
    let mut probe = head.clone();
    for i in 0..n {
        let orig = head.params()[i];
        let plus = orig + eps;
        let minus = orig - eps;
        *probe.params_mut().nth(i).unwrap() = plus;
        let lp = oracle_loss(&probe, base, feature, a, r, b, s);
        *probe.params_mut().nth(i).unwrap() = minus;
        let lm = oracle_loss(&probe, base, feature, a, r, b, s);
        *probe.params_mut().nth(i).unwrap() = orig;
        out.push((lp - lm) / (f64::from(plus) - f64::from(minus)));
    }
    out
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub struct Instance {
    pub head: PerturbationHead,
    pub base: LogitsMatrix,
    pub feature: Feature,
    pub action: Action,
    pub r: f64,
    pub b: f64,
    pub settings: LossSettings,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = rng(seed);
    let (f, h, d, k) = (
        rng.random_range(2..9),
        rng.random_range(2..8),
        rng.random_range(1..4),
        rng.random_range(2..7),
    );
    let settings = LossSettings {
        lambda: rng.random_range(0.2..2.0),
        lambda_kl: rng.random_range(0.0..1.0),
        reinforce_weight: 1.0,
        gate: KlGate::Feedback,
    };
    Instance {
        head: random_head(&mut rng, f, h, d, k),
        base: random_logits(&mut rng, d, k, 2.0),
        feature: random_feature(&mut rng, f),
        action: random_action(&mut rng, d, k),
        r: rng.random_range(0.0..1.0),
        b: rng.random_range(0.0..1.0),
        settings,
    }
}

/// Worst relative error over all parameters of one instance.
pub fn max_error(inst: &Instance) -> f64 {
    let (value, grad) = pdf_loss(
        &inst.head,
        &inst.base,
        &inst.feature,
        &inst.action,
        inst.r,
        inst.b,
        &inst.settings,
    )
    .unwrap();
    let oracle = oracle_loss(&inst.head, &inst.base, &inst.feature, &inst.action, inst.r, inst.b, &inst.settings);
    assert!((value.total - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    let numeric = numeric_grad(&inst.head, &inst.base, &inst.feature, &inst.action, inst.r, inst.b, &inst.settings);
    grad.to_vec()
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

