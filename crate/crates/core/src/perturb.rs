//! Perturbation head, perturbed logits, candidate decoding and majority voting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PdfError, Result};
use crate::nn::{tanh_in_place, Dense};
use crate::policy::greedy_action;
use crate::types::{Action, Feature, LogitsMatrix};
use crate::weights::{take_tensor, Tensor};

const META_TENSOR: &str = "perturb.meta";

/// Trainable two-layer head `F -> hidden -> D·K`.
///
/// The output layer starts at exactly zero, so a fresh head leaves the
/// frozen logits untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationHead {
    dims: usize,
    tokens: usize,
    pub(crate) hidden: Dense,
    pub(crate) output: Dense,
}

impl PerturbationHead {
    pub fn new(feature: usize, hidden: usize, dims: usize, tokens: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            dims,
            tokens,
            hidden: Dense::glorot(feature, hidden, &mut rng),
            output: Dense::zeros(hidden, dims * tokens),
        }
    }

    /// Builds a head from explicit layers. Used by tests that need a head
    /// with a nonzero output layer.
    pub fn from_layers(hidden: Dense, output: Dense, dims: usize, tokens: usize) -> Result<Self> {
        if output.inputs() != hidden.outputs() || output.outputs() != dims * tokens {
            return Err(PdfError::shape(
                format!("{} -> {} -> {}", hidden.inputs(), hidden.outputs(), dims * tokens),
                format!("{} -> {} -> {}", output.inputs(), output.outputs(), output.outputs()),
            ));
        }
        Ok(Self {
            dims,
            tokens,
            hidden,
            output,
        })
    }

    pub fn feature_len(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn hidden_len(&self) -> usize {
        self.hidden.outputs()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn layers(&self) -> (&Dense, &Dense) {
        (&self.hidden, &self.output)
    }

    pub fn num_params(&self) -> usize {
        self.hidden.num_params() + self.output.num_params()
    }

    /// All parameters in a fixed order: hidden weights, hidden bias, output
    /// weights, output bias.
    pub fn params(&self) -> Vec<f32> {
        self.hidden.params().chain(self.output.params()).collect()
    }

    /// Mutable access in the same order as [`PerturbationHead::params`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f32> {
        self.hidden.params_mut().chain(self.output.params_mut())
    }

    fn check_feature(&self, feature: &Feature) -> Result<()> {
        if feature.len() != self.feature_len() {
            return Err(PdfError::shape(format!("feature of length {}", self.feature_len()), feature.len()));
        }
        Ok(())
    }

    /// Returns `(hidden activations, raw perturbation)`.
    pub(crate) fn forward_parts(&self, feature: &Feature) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_feature(feature)?;
        let mut h = self.hidden.forward(feature.values());
        tanh_in_place(&mut h);
        let out = self.output.forward(&h);
        Ok((h, out))
    }

    /// The raw perturbation for a feature, flattened `D × K`.
    pub fn forward(&self, feature: &Feature) -> Result<Vec<f64>> {
        Ok(self.forward_parts(feature)?.1)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let meta = [self.feature_len(), self.hidden_len(), self.dims, self.tokens]
            .iter()
            .map(|v| *v as f32)
            .collect();
        let mut out = vec![Tensor {
            name: META_TENSOR.into(),
            dims: vec![4],
            data: meta,
        }];
        out.extend(self.hidden.to_tensors("perturb.hidden"));
        out.extend(self.output.to_tensors("perturb.output"));
        out
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let meta = take_tensor(tensors, META_TENSOR, &[4])?;
        if meta.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
            return Err(PdfError::DimensionMismatch(format!("invalid head header {meta:?}")));
        }
        let [feature, hidden, dims, tokens] = [0, 1, 2, 3].map(|i| meta[i] as usize);
        Ok(Self {
            dims,
            tokens,
            hidden: Dense::from_tensors(tensors, "perturb.hidden", feature, hidden)?,
            output: Dense::from_tensors(tensors, "perturb.output", hidden, dims * tokens)?,
        })
    }

    pub fn checksum(&self) -> String {
        crate::weights::checksum(&self.to_tensors())
    }
}

/// `base + lambda * head(feature)`, elementwise.
///
/// Entries whose perturbation is exactly zero keep the base value bit-for-bit.
pub fn perturbed_logits(base: &LogitsMatrix, head: &PerturbationHead, feature: &Feature, lambda: f64) -> Result<LogitsMatrix> {
    if base.dims() != head.dims() || base.tokens() != head.tokens() {
        return Err(PdfError::shape(
            format!("{}x{} logits", head.dims(), head.tokens()),
            format!("{}x{}", base.dims(), base.tokens()),
        ));
    }
    if lambda == 0.0 {
        head.check_feature(feature)?;
        return Ok(base.clone());
    }
    let delta = head.forward(feature)?;
    let values = base
        .values()
        .iter()
        .zip(&delta)
        .map(|(b, d)| if *d == 0.0 { *b } else { b + lambda * d })
        .collect();
    LogitsMatrix::new(base.dims(), base.tokens(), values)
}

/// Greedy action for each view, in view order.
pub fn decode_candidates(view_logits: &[LogitsMatrix]) -> Result<Vec<Action>> {
    if view_logits.is_empty() {
        return Err(PdfError::EmptyInput("view logits"));
    }
    Ok(view_logits.iter().map(greedy_action).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VoteMode {
    /// Majority per action dimension.
    #[default]
    #[serde(rename = "dim_wise", alias = "dim")]
    DimWise,
    /// Majority over whole action tuples.
    #[serde(rename = "action_wise", alias = "action")]
    ActionWise,
}

impl FromStr for VoteMode {
    type Err = PdfError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dim" | "dim_wise" => Ok(VoteMode::DimWise),
            "action" | "action_wise" => Ok(VoteMode::ActionWise),
            _ => Err(PdfError::InvalidConfig(format!("vote mode must be dim or action, got {s:?}"))),
        }
    }
}

impl fmt::Display for VoteMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VoteMode::DimWise => "dim_wise",
            VoteMode::ActionWise => "action_wise",
        })
    }
}

/// Picks the most frequent item. Ties go to the original view's item when it
/// is among the leaders, otherwise to the smallest leader, so that the result
/// does not depend on the order of the augmented views.
fn modal<T: Ord + Copy>(mut items: impl Iterator<Item = T>) -> T {
    let original = items.next().expect("nonempty candidates");
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    counts.insert(original, 1);
    for it in items {
        *counts.entry(it).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    if counts[&original] == best {
        return original;
    }
    counts
        .into_iter()
        .find(|(_, c)| *c == best)
        .map(|(v, _)| v)
        .expect("some leader exists")
}

/// Majority vote over candidate actions; candidate 0 is the original view.
pub fn vote(candidates: &[Action], mode: VoteMode) -> Result<Action> {
    let first = candidates.first().ok_or(PdfError::EmptyInput("candidates"))?;
    let dims = first.dims();
    if let Some((index, c)) = candidates.iter().enumerate().find(|(_, c)| c.dims() != dims) {
        return Err(PdfError::InconsistentDims {
            index,
            expected: dims,
            actual: c.dims(),
        });
    }
    Ok(match mode {
        VoteMode::DimWise => Action::from_trusted(
            (0..dims)
                .map(|d| modal(candidates.iter().map(move |c| c.token(d))))
                .collect(),
        ),
        VoteMode::ActionWise => modal(candidates.iter()).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(t: &[usize]) -> Action {
        Action::new(t.to_vec(), 16).unwrap()
    }

    #[test]
    fn dim_wise_example() {
        let c = [act(&[1, 2]), act(&[1, 3]), act(&[2, 3])];
        assert_eq!(vote(&c, VoteMode::DimWise).unwrap(), act(&[1, 3]));
    }

    #[test]
    fn action_wise_three_way_tie_falls_back_to_original() {
        let c = [act(&[1, 2]), act(&[1, 3]), act(&[2, 3])];
        assert_eq!(vote(&c, VoteMode::ActionWise).unwrap(), act(&[1, 2]));
    }

    #[test]
    fn singleton_and_one_dimensional() {
        for mode in [VoteMode::DimWise, VoteMode::ActionWise] {
            assert_eq!(vote(&[act(&[4, 5])], mode).unwrap(), act(&[4, 5]));
            let c = [act(&[3]), act(&[3]), act(&[5])];
            assert_eq!(vote(&c, mode).unwrap(), act(&[3]));
        }
    }

    #[test]
    fn tie_without_original_goes_to_first_leader() {
        let c = [act(&[1]), act(&[2]), act(&[3]), act(&[3]), act(&[2])];
        assert_eq!(vote(&c, VoteMode::DimWise).unwrap(), act(&[2]));
    }

    #[test]
    fn vote_errors() {
        assert!(matches!(vote(&[], VoteMode::DimWise), Err(PdfError::EmptyInput(_))));
        let c = [act(&[1, 2]), act(&[1])];
        assert!(matches!(
            vote(&c, VoteMode::ActionWise),
            Err(PdfError::InconsistentDims { index: 1, .. })
        ));
        assert!(decode_candidates(&[]).is_err());
    }

    #[test]
    fn fresh_head_leaves_base_untouched() {
        let head = PerturbationHead::new(3, 5, 2, 4, 11);
        let base = LogitsMatrix::new(2, 4, vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -3.0, 0.25]).unwrap();
        let f = Feature::new(vec![0.3, -0.1, 0.8]).unwrap();
        for lambda in [0.0, 1.0, 7.5] {
            assert_eq!(perturbed_logits(&base, &head, &f, lambda).unwrap(), base);
        }
    }

    #[test]
    fn perturbation_is_linear_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = PerturbationHead::from_layers(
            Dense::glorot(3, 5, &mut rng),
            Dense::glorot(5, 8, &mut rng),
            2,
            4,
        )
        .unwrap();
        let base = LogitsMatrix::new(2, 4, vec![0.1; 8]).unwrap();
        let f = Feature::new(vec![0.3, -0.1, 0.8]).unwrap();
        let one = perturbed_logits(&base, &head, &f, 1.0).unwrap();
        let two = perturbed_logits(&base, &head, &f, 2.0).unwrap();
        for i in 0..8 {
            let d1 = one.values()[i] - 0.1;
            let d2 = two.values()[i] - 0.1;
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
        assert_eq!(perturbed_logits(&base, &head, &f, 0.0).unwrap(), base);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let head = PerturbationHead::new(3, 5, 2, 4, 0);
        let base = LogitsMatrix::new(2, 3, vec![0.0; 6]).unwrap();
        let f = Feature::new(vec![0.0; 3]).unwrap();
        assert!(perturbed_logits(&base, &head, &f, 1.0).is_err());
        let base = LogitsMatrix::new(2, 4, vec![0.0; 8]).unwrap();
        let f = Feature::new(vec![0.0; 2]).unwrap();
        assert!(perturbed_logits(&base, &head, &f, 1.0).is_err());
    }

    #[test]
    fn vote_mode_parses() {
        assert_eq!("dim".parse::<VoteMode>().unwrap(), VoteMode::DimWise);
        assert_eq!("action_wise".parse::<VoteMode>().unwrap(), VoteMode::ActionWise);
        assert!("tuple".parse::<VoteMode>().is_err());
    }
}
