//! Test-time adaptation of a frozen tokenized policy from delayed scalar
//! feedback, without a verifier.
//!
//! The frozen policy maps an observation and instruction to a feature vector
//! and per-dimension token logits. A small perturbation head adds a learned
//! offset to those logits. At each step the normalized entropy of the frozen
//! logits sets how many augmented views to evaluate; their greedy decodes are
//! merged by majority vote. After each episode the head is updated from the
//! episode's feedback.

pub mod adapt;
pub mod augment;
pub mod env;
pub mod error;
pub mod harness;
mod nn;
pub mod perturb;
pub mod policy;
pub mod store;
pub mod types;
pub mod weights;

pub use adapt::{adapt, pdf_loss, AdaptReport, BaselineTracker, HeadGrad, KlGate, LossSettings, LossValue, RolloutBuffer};
pub use augment::{budget, generate_views, normalized_entropy, uncertainty, AugmentConfig, AugmentKind, AugmentSpec, Transform};
pub use error::{PdfError, Result};
pub use nn::{Dense, DenseGrad};
pub use perturb::{decode_candidates, perturbed_logits, vote, PerturbationHead, VoteMode};
pub use policy::{bc_accuracy, greedy_action, train_bc, Arch, BcOptions, DemoStep, Demonstration, PolicySnapshot};
pub use store::{deserialize_snapshot, load_policy, serialize_snapshot, StoredWeights};
pub use types::*;
