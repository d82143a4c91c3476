//! Delayed-feedback learner for the perturbation head.
//!
//! After each episode the scalar feedback `r` is compared with a baseline `b`.
//! Sampled records contribute a REINFORCE term on the perturbed policy,
//! `-(r - b) * sum_d log pi~_d(a_d)`, and, only when `r > b`, a KL term
//! `lambda_kl * sum_d KL(pi_d || pi~_d)` that keeps the perturbed policy close
//! to the frozen one. Gradients flow into the head only.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PdfError, Result};
use crate::nn::{tanh_backward, DenseGrad};
use crate::perturb::PerturbationHead;
use crate::policy::PolicySnapshot;
use crate::types::{log_softmax, Action, BaselineMode, Feature, Feedback, HyperParams, LogitsMatrix, RolloutRecord};

/// Per-episode store of rollout records, FIFO-evicting past `capacity`.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    records: VecDeque<RolloutRecord>,
    capacity: usize,
    persistent: bool,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::new(),
            capacity: capacity.max(1),
            persistent: false,
        }
    }

    /// A buffer that keeps its records across adaptation phases.
    pub fn persistent(capacity: usize) -> Self {
        Self {
            persistent: true,
            ..Self::new(capacity)
        }
    }

    pub fn push(&mut self, record: RolloutRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&RolloutRecord> {
        self.records.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RolloutRecord> {
        self.records.iter()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    fn end_phase(&mut self) {
        if !self.persistent {
            self.clear();
        }
    }
}

/// Tracks the baseline `b`.
#[derive(Clone, Debug)]
pub struct BaselineTracker {
    mode: BaselineMode,
    prior: f64,
    history: VecDeque<f64>,
}

impl BaselineTracker {
    pub fn new(mode: BaselineMode, prior: f64) -> Self {
        Self {
            mode,
            prior,
            history: VecDeque::new(),
        }
    }

    pub fn from_hp(hp: &HyperParams) -> Self {
        Self::new(hp.baseline, hp.baseline_prior)
    }

    pub fn value(&self) -> f64 {
        match self.mode {
            BaselineMode::Fixed(v) => v,
            BaselineMode::RunningMean { .. } if self.history.is_empty() => self.prior,
            BaselineMode::RunningMean { .. } => self.history.iter().sum::<f64>() / self.history.len() as f64,
        }
    }

    pub fn observe(&mut self, feedback: Feedback) {
        if let BaselineMode::RunningMean { window } = self.mode {
            if self.history.len() == window {
                self.history.pop_front();
            }
            self.history.push_back(feedback.value());
        }
    }
}

/// When the KL term is active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlGate {
    /// Open iff `r > b`.
    #[default]
    Feedback,
    Open,
    Closed,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub lambda_kl: f64,
    /// Multiplies `(r - b)`; zero removes the REINFORCE term.
    pub reinforce_weight: f64,
    pub gate: KlGate,
}

impl LossSettings {
    pub fn from_hp(hp: &HyperParams) -> Self {
        Self {
            lambda: hp.lambda,
            lambda_kl: hp.lambda_kl,
            reinforce_weight: 1.0,
            gate: KlGate::Feedback,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValue {
    /// `-(r - b) * sum_d log pi~_d(a_d)`, scaled by the REINFORCE weight.
    pub reinforce: f64,
    /// `sum_d KL(pi_d || pi~_d)`; zero when the gate is closed.
    pub kl: f64,
    pub total: f64,
}

/// Gradient with respect to every head parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub hidden: DenseGrad,
    pub output: DenseGrad,
}

impl HeadGrad {
    pub fn zeros(head: &PerturbationHead) -> Self {
        Self {
            hidden: DenseGrad::zeros_like(&head.hidden),
            output: DenseGrad::zeros_like(&head.output),
        }
    }

    /// Flattened in [`PerturbationHead::params`] order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.hidden.iter().chain(self.output.iter()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.hidden.iter().chain(self.output.iter()).all(|g| g == 0.0)
    }

    fn add_assign(&mut self, other: &HeadGrad) {
        self.hidden.add_assign(&other.hidden);
        self.output.add_assign(&other.output);
    }

    fn scale(&mut self, s: f64) {
        self.hidden.scale(s);
        self.output.scale(s);
    }
}

/// Loss and exact gradient for one record.
///
/// `base` must be the frozen logits for `feature`.
#[allow(clippy::too_many_arguments)]
pub fn pdf_loss(
    head: &PerturbationHead,
    base: &LogitsMatrix,
    feature: &Feature,
    executed: &Action,
    r: f64,
    b: f64,
    settings: &LossSettings,
) -> Result<(LossValue, HeadGrad)> {
    let (dims, k) = (head.dims(), head.tokens());
    if base.dims() != dims || base.tokens() != k {
        return Err(PdfError::shape(format!("{dims}x{k} logits"), format!("{}x{}", base.dims(), base.tokens())));
    }
    if executed.dims() != dims || executed.tokens().iter().any(|t| *t >= k) {
        return Err(PdfError::shape(format!("action with {dims} dims in [0, {k})"), executed.to_string()));
    }
    if !r.is_finite() || !b.is_finite() {
        return Err(PdfError::Numeric { term: "feedback or baseline" });
    }

    let (hidden, delta) = head.forward_parts(feature)?;
    let perturbed: Vec<f64> = base
        .values()
        .iter()
        .zip(&delta)
        .map(|(z, d)| z + settings.lambda * d)
        .collect();
    if perturbed.iter().any(|v| !v.is_finite()) {
        return Err(PdfError::Numeric { term: "perturbed logits" });
    }

    let advantage = settings.reinforce_weight * (r - b);
    let gate_open = match settings.gate {
        KlGate::Feedback => r > b,
        KlGate::Open => true,
        KlGate::Closed => false,
    };
    let use_kl = gate_open && settings.lambda_kl != 0.0;

    let mut value = LossValue::default();
    let mut g_logits = vec![0.0; dims * k];
    for d in 0..dims {
        let row = &perturbed[d * k..(d + 1) * k];
        let log_pt = log_softmax(row);
        let g = &mut g_logits[d * k..(d + 1) * k];
        if advantage != 0.0 {
            let a = executed.token(d);
            value.reinforce -= advantage * log_pt[a];
            for (j, gj) in g.iter_mut().enumerate() {
                let p = log_pt[j].exp();
                *gj += advantage * (p - if j == a { 1.0 } else { 0.0 });
            }
        }
        if use_kl {
            let log_p = log_softmax(base.row(d));
            for j in 0..k {
                let p = log_p[j].exp();
                if p > 0.0 {
                    value.kl += p * (log_p[j] - log_pt[j]);
                }
                g[j] += settings.lambda_kl * (log_pt[j].exp() - p);
            }
        }
    }
    if !value.reinforce.is_finite() {
        return Err(PdfError::Numeric { term: "reinforce term" });
    }
    if !value.kl.is_finite() {
        return Err(PdfError::Numeric { term: "kl term" });
    }
    // guard against tiny negative round-off; KL is nonnegative
    value.kl = value.kl.max(0.0);
    value.total = value.reinforce + if use_kl { settings.lambda_kl * value.kl } else { 0.0 };

    let mut grad = HeadGrad::zeros(head);
    if settings.lambda != 0.0 && g_logits.iter().any(|g| *g != 0.0) {
        let g_out: Vec<f64> = g_logits.iter().map(|g| settings.lambda * g).collect();
        let g_hidden = head.output.backward(&hidden, &g_out, &mut grad.output);
        let g_pre = tanh_backward(&hidden, &g_hidden);
        head.hidden.backward_params(feature.values(), &g_pre, &mut grad.hidden);
    }
    if grad.to_vec().iter().any(|g| !g.is_finite()) {
        return Err(PdfError::Numeric { term: "gradient" });
    }
    Ok((value, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AdaptReport {
    pub baseline: f64,
    pub mean_loss: f64,
    pub steps: usize,
}

/// One adaptation phase: `hp.grad_steps_per_episode` SGD steps on batches
/// sampled uniformly with replacement from `buffer`, then the baseline absorbs
/// `feedback` and the buffer is cleared (unless persistent).
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    head: &mut PerturbationHead,
    buffer: &mut RolloutBuffer,
    snapshot: &PolicySnapshot,
    feedback: Feedback,
    baseline: &mut BaselineTracker,
    hp: &HyperParams,
    settings: &LossSettings,
    rng_seed: u64,
) -> Result<AdaptReport> {
    if buffer.is_empty() {
        return Err(PdfError::EmptyBuffer);
    }
    let b = baseline.value();
    let r = feedback.value();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut loss_sum = 0.0;
    for _ in 0..hp.grad_steps_per_episode {
        let mut total = HeadGrad::zeros(head);
        for _ in 0..hp.batch_size {
            let rec = &buffer.records[rng.random_range(0..buffer.len())];
            let base = snapshot.lm_logits(&rec.feature)?;
            let (loss, grad) = pdf_loss(head, &base, &rec.feature, &rec.executed_action, r, b, settings)?;
            loss_sum += loss.total;
            total.add_assign(&grad);
        }
        if total.is_zero() {
            continue;
        }
        total.scale(1.0 / hp.batch_size as f64);
        head.hidden.descend(&total.hidden, hp.learning_rate);
        head.output.descend(&total.output, hp.learning_rate);
    }
    baseline.observe(feedback);
    buffer.end_phase();
    Ok(AdaptReport {
        baseline: b,
        mean_loss: loss_sum / (hp.grad_steps_per_episode * hp.batch_size) as f64,
        steps: hp.grad_steps_per_episode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use crate::types::softmax;

    fn record(t: usize) -> RolloutRecord {
        RolloutRecord {
            feature: Feature::new(vec![t as f64]).unwrap(),
            final_logits: LogitsMatrix::new(1, 2, vec![0.0, 0.0]).unwrap(),
            executed_action: Action::new(vec![0], 2).unwrap(),
            timestep: t,
            view_index: 0,
        }
    }

    #[test]
    fn buffer_push_and_evict() {
        let mut buf = RolloutBuffer::new(3);
        buf.push(record(0));
        assert_eq!(buf.len(), 1);
        for t in 1..4 {
            buf.push(record(t));
        }
        assert_eq!(buf.len(), 3);
        let order: Vec<usize> = buf.iter().map(|r| r.timestep).collect();
        assert_eq!(order, vec![1, 2, 3]);
    }

    #[test]
    fn baseline_modes() {
        let mut fixed = BaselineTracker::new(BaselineMode::Fixed(0.5), 0.0);
        fixed.observe(Feedback::new(1.0).unwrap());
        assert_eq!(fixed.value(), 0.5);

        let mut mean = BaselineTracker::new(BaselineMode::RunningMean { window: 3 }, 0.0);
        assert_eq!(mean.value(), 0.0);
        for r in [0.0, 1.0, 1.0] {
            mean.observe(Feedback::new(r).unwrap());
        }
        assert!((mean.value() - 2.0 / 3.0).abs() < 1e-15);
        mean.observe(Feedback::new(1.0).unwrap());
        assert_eq!(mean.value(), 1.0);
    }

    fn random_head(seed: u64) -> PerturbationHead {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PerturbationHead::from_layers(Dense::glorot(3, 4, &mut rng), Dense::glorot(4, 6, &mut rng), 2, 3).unwrap()
    }

    #[test]
    fn equal_feedback_and_baseline_is_inert() {
        let head = random_head(1);
        let base = LogitsMatrix::new(2, 3, vec![0.2, -0.4, 1.0, 0.0, 0.3, -0.9]).unwrap();
        let f = Feature::new(vec![0.5, -0.5, 0.1]).unwrap();
        let a = Action::new(vec![2, 0], 3).unwrap();
        let settings = LossSettings {
            lambda: 1.0,
            lambda_kl: 0.7,
            reinforce_weight: 1.0,
            gate: KlGate::Feedback,
        };
        let (loss, grad) = pdf_loss(&head, &base, &f, &a, 0.4, 0.4, &settings).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grad.is_zero());
    }

    #[test]
    fn fresh_head_loss_is_negative_log_likelihood() {
        let head = PerturbationHead::new(3, 4, 2, 3, 5);
        let base = LogitsMatrix::new(2, 3, vec![0.2, -0.4, 1.0, 0.0, 0.3, -0.9]).unwrap();
        let f = Feature::new(vec![0.5, -0.5, 0.1]).unwrap();
        let a = Action::new(vec![2, 0], 3).unwrap();
        let settings = LossSettings {
            lambda: 1.0,
            lambda_kl: 0.7,
            reinforce_weight: 1.0,
            gate: KlGate::Feedback,
        };
        let (loss, _) = pdf_loss(&head, &base, &f, &a, 1.0, 0.25, &settings).unwrap();
        let p0 = softmax(base.row(0));
        let p1 = softmax(base.row(1));
        let expect = -0.75 * (p0[2].ln() + p1[0].ln());
        assert_eq!(loss.kl, 0.0);
        assert!((loss.total - expect).abs() < 1e-12);
    }

    #[test]
    fn adapt_rejects_empty_buffer() {
        let snapshot = PolicySnapshot::init(crate::policy::Arch::default(), 0).unwrap();
        let mut head = PerturbationHead::new(32, 8, 4, 16, 0);
        let mut buf = RolloutBuffer::new(4);
        let mut tracker = BaselineTracker::new(BaselineMode::Fixed(0.0), 0.0);
        let hp = HyperParams::default();
        let err = adapt(
            &mut head,
            &mut buf,
            &snapshot,
            Feedback::new(1.0).unwrap(),
            &mut tracker,
            &hp,
            &LossSettings::from_hp(&hp),
            0,
        );
        assert!(matches!(err, Err(PdfError::EmptyBuffer)));
    }
}
