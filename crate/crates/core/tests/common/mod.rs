#![allow(dead_code)]

pub mod oracle;

use std::sync::OnceLock;

use pdf_core::harness::{train_snapshot, EnvSettings};
use pdf_core::{Action, Arch, BcOptions, Dense, Feature, HyperParams, LogitsMatrix, PerturbationHead, PolicySnapshot};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Head with every parameter drawn at random (the output layer included), so
/// that no gradient entry is structurally zero.
pub fn random_head(rng: &mut ChaCha8Rng, feature: usize, hidden: usize, dims: usize, tokens: usize) -> PerturbationHead {
    let h = Dense::glorot(feature, hidden, rng);
    let o = Dense::glorot(hidden, dims * tokens, rng);
    let mut head = PerturbationHead::from_layers(h, o, dims, tokens).unwrap();
    for p in head.params_mut() {
        *p += rng.random_range(-0.1f32..0.1);
    }
    head
}

pub fn random_feature(rng: &mut ChaCha8Rng, len: usize) -> Feature {
    Feature::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_logits(rng: &mut ChaCha8Rng, dims: usize, tokens: usize, scale: f64) -> LogitsMatrix {
    LogitsMatrix::new(dims, tokens, (0..dims * tokens).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_action(rng: &mut ChaCha8Rng, dims: usize, tokens: usize) -> Action {
    Action::new((0..dims).map(|_| rng.random_range(0..tokens)).collect(), tokens).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// The frozen policy used by the end-to-end tests: BC on the canonical
/// layouts of tasks 0..10 with default options.
pub fn bc_snapshot() -> PolicySnapshot {
    static SNAPSHOT: OnceLock<PolicySnapshot> = OnceLock::new();
    SNAPSHOT
        .get_or_init(|| {
            let tasks: Vec<u64> = (0..10).collect();
            train_snapshot(Arch::default(), &EnvSettings::default(), &tasks, &BcOptions::default()).unwrap()
        })
        .clone()
}

/// Hyperparameters of the shipped pose-shift experiment.
pub fn experiment_hp() -> HyperParams {
    HyperParams {
        baseline: "fixed:0.5".parse().unwrap(),
        learning_rate: 0.3,
        ..HyperParams::default()
    }
}

/// Sum of per-dimension log-probabilities of `action` under `logits`.
pub fn log_likelihood(logits: &LogitsMatrix, action: &Action) -> f64 {
    logits
        .rows()
        .zip(action.tokens())
        .map(|(row, &a)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            row[a] - lse
        })
        .sum()
}
