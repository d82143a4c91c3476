//! Snapshot files holding either a frozen policy or a perturbation head.

use std::path::Path;

use crate::error::{PdfError, Result};
use crate::perturb::PerturbationHead;
use crate::policy::{Arch, PolicySnapshot};
use crate::weights::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum StoredWeights {
    Policy(PolicySnapshot),
    Head(PerturbationHead),
}

impl StoredWeights {
    pub fn to_tensors(&self) -> Vec<Tensor> {
        match self {
            StoredWeights::Policy(p) => p.to_tensors(),
            StoredWeights::Head(h) => h.to_tensors(),
        }
    }

    pub fn checksum(&self) -> String {
        weights::checksum(&self.to_tensors())
    }
}

impl From<PolicySnapshot> for StoredWeights {
    fn from(p: PolicySnapshot) -> Self {
        StoredWeights::Policy(p)
    }
}

impl From<PerturbationHead> for StoredWeights {
    fn from(h: PerturbationHead) -> Self {
        StoredWeights::Head(h)
    }
}

pub fn serialize_snapshot(stored: &StoredWeights, path: &Path) -> Result<()> {
    weights::write_file(path, &stored.to_tensors())
}

/// Reads a snapshot, telling policy from head by its metadata tensor. With
/// `expected` set, a policy whose header disagrees is rejected.
pub fn deserialize_snapshot(path: &Path, expected: Option<&Arch>) -> Result<StoredWeights> {
    let tensors = weights::read_file(path)?;
    if tensors.iter().any(|t| t.name == "policy.meta") {
        PolicySnapshot::from_tensors(&tensors, expected).map(StoredWeights::Policy)
    } else if tensors.iter().any(|t| t.name == "perturb.meta") {
        PerturbationHead::from_tensors(&tensors).map(StoredWeights::Head)
    } else {
        Err(PdfError::MalformedHeader("no policy or head metadata tensor".into()))
    }
}

/// Reads a policy snapshot, failing if the file holds a head.
pub fn load_policy(path: &Path, expected: Option<&Arch>) -> Result<PolicySnapshot> {
    match deserialize_snapshot(path, expected)? {
        StoredWeights::Policy(p) => Ok(p),
        StoredWeights::Head(_) => Err(PdfError::MalformedHeader(format!(
            "{} holds a perturbation head, not a policy",
            path.display()
        ))),
    }
}
