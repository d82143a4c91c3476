//! Shared domain types.
//!
//! Every type validates its invariants on construction and is immutable
//! afterwards, so values can be shared read-only across threads.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PdfError, Result};

/// Token id reserved for instruction padding. Its embedding is pinned to zero.
pub const PAD_ID: u32 = 0;

/// A pixel observation laid out as `height × width × channels`, row-major,
/// channel-last. All values are finite and within `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Observation {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        let expected = height * width * channels;
        if pixels.len() != expected {
            return Err(PdfError::shape(
                format!("{height}x{width}x{channels} = {expected} pixels"),
                format!("{} pixels", pixels.len()),
            ));
        }
        if let Some((i, v)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(PdfError::InvalidValue(format!(
                "pixel {i} = {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[self.index(y, x, c)]
    }
}

/// A padded sequence of instruction token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    tokens: Vec<u32>,
}

impl Instruction {
    /// Pads `tokens` to `max_len` with [`PAD_ID`].
    pub fn new(tokens: &[u32], vocab: u32, max_len: usize) -> Result<Self> {
        if tokens.len() > max_len {
            return Err(PdfError::InvalidValue(format!(
                "instruction has {} tokens, max length is {max_len}",
                tokens.len()
            )));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= vocab) {
            return Err(PdfError::InvalidValue(format!(
                "token id {t} outside vocabulary of size {vocab}"
            )));
        }
        let mut padded = tokens.to_vec();
        padded.resize(max_len, PAD_ID);
        let first_pad = padded.iter().position(|t| *t == PAD_ID).unwrap_or(max_len);
        if padded[first_pad..].iter().any(|t| *t != PAD_ID) {
            return Err(PdfError::InvalidValue(
                "pad ids may only appear as a suffix".into(),
            ));
        }
        Ok(Self { tokens: padded })
    }

    pub fn all_pad(max_len: usize) -> Self {
        Self {
            tokens: vec![PAD_ID; max_len],
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A tokenized action: one token index in `[0, K)` per action dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(Vec<usize>);

impl Action {
    pub fn new(tokens: Vec<usize>, num_tokens: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(PdfError::EmptyInput("action"));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= num_tokens) {
            return Err(PdfError::InvalidValue(format!(
                "action token {t} outside [0, {num_tokens})"
            )));
        }
        Ok(Self(tokens))
    }

    /// Builds an action without range checks; used where tokens are known to
    /// come from an argmax or a vote over valid actions.
    pub(crate) fn from_trusted(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn token(&self, dim: usize) -> usize {
        self.0[dim]
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, ")")
    }
}

/// `D × K` token scores, row `d` holding the K scores of action dimension `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitsMatrix {
    dims: usize,
    tokens: usize,
    values: Vec<f64>,
}

impl LogitsMatrix {
    pub fn new(dims: usize, tokens: usize, values: Vec<f64>) -> Result<Self> {
        if dims == 0 || tokens == 0 {
            return Err(PdfError::EmptyInput("logits matrix"));
        }
        if values.len() != dims * tokens {
            return Err(PdfError::shape(
                format!("{dims}x{tokens}"),
                format!("{} values", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PdfError::Numeric { term: "logits" });
        }
        Ok(Self {
            dims,
            tokens,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.len();
        let tokens = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != tokens) {
            return Err(PdfError::shape(
                format!("rows of length {tokens}"),
                "ragged rows",
            ));
        }
        Self::new(dims, tokens, rows.concat())
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.values[d * self.tokens..(d + 1) * self.tokens]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.tokens)
    }

    /// Row-wise softmax probabilities, same layout as the logits.
    pub fn softmax(&self) -> Vec<f64> {
        self.rows().flat_map(softmax).collect()
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|z| z - log_sum).collect()
}

/// The frozen encoder's output for one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Feature(Vec<f64>);

impl Feature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PdfError::Numeric { term: "feature" });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Delayed scalar feedback: a success flag or a cumulative reward.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Feedback(f64);

impl Feedback {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(PdfError::Numeric { term: "feedback" });
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// One view at one timestep, held until the episode's feedback arrives.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub feature: Feature,
    /// Perturbed logits of this view.
    pub final_logits: LogitsMatrix,
    /// The voted action that was sent to the environment.
    pub executed_action: Action,
    pub timestep: usize,
    /// 0 is the original, unaugmented view.
    pub view_index: usize,
}

/// How the scalar baseline `b` evolves.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineMode {
    Fixed(f64),
    RunningMean { window: usize },
}

impl Default for BaselineMode {
    fn default() -> Self {
        BaselineMode::RunningMean { window: 10 }
    }
}

impl FromStr for BaselineMode {
    type Err = PdfError;

    /// Parses `fixed:<value>` or `mean:<window>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || PdfError::InvalidConfig(format!("baseline must be fixed:<v> or mean:<w>, got {s:?}"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind.trim() {
            "fixed" => {
                let v: f64 = arg.trim().parse().map_err(|_| bad())?;
                if !v.is_finite() {
                    return Err(bad());
                }
                Ok(BaselineMode::Fixed(v))
            }
            "mean" => {
                let window: usize = arg.trim().parse().map_err(|_| bad())?;
                if window == 0 {
                    return Err(PdfError::InvalidConfig("baseline window must be >= 1".into()));
                }
                Ok(BaselineMode::RunningMean { window })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for BaselineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineMode::Fixed(v) => write!(f, "fixed:{v}"),
            BaselineMode::RunningMean { window } => write!(f, "mean:{window}"),
        }
    }
}

impl TryFrom<String> for BaselineMode {
    type Error = PdfError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaselineMode> for String {
    fn from(m: BaselineMode) -> String {
        m.to_string()
    }
}

impl Serialize for BaselineMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for BaselineMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Integerization of the augmentation budget.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    #[default]
    Floor,
    /// Round half to even.
    Round,
}

/// How per-dimension normalized entropies are combined into one score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyAggregate {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Perturbation scale.
    pub lambda: f64,
    pub lambda_kl: f64,
    /// Maximum number of augmented views per timestep.
    pub n_max: usize,
    pub learning_rate: f64,
    pub baseline: BaselineMode,
    /// Baseline returned by a running mean before any feedback arrives.
    pub baseline_prior: f64,
    pub rounding: Rounding,
    pub uncertainty: UncertaintyAggregate,
    pub batch_size: usize,
    pub grad_steps_per_episode: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda_kl: 0.1,
            n_max: 3,
            learning_rate: 1e-2,
            baseline: BaselineMode::default(),
            baseline_prior: 0.0,
            rounding: Rounding::Floor,
            uncertainty: UncertaintyAggregate::Mean,
            batch_size: 32,
            grad_steps_per_episode: 4,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PdfError::InvalidConfig(m));
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lambda_kl.is_finite() && self.lambda_kl >= 0.0) {
            return err(format!("lambda_kl must be >= 0, got {}", self.lambda_kl));
        }
        // zero is allowed so that a no-op step can be exercised
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return err(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !self.baseline_prior.is_finite() {
            return err("baseline_prior must be finite".into());
        }
        match self.baseline {
            BaselineMode::Fixed(v) if !v.is_finite() => return err("fixed baseline must be finite".into()),
            BaselineMode::RunningMean { window: 0 } => return err("baseline window must be >= 1".into()),
            _ => {}
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.grad_steps_per_episode == 0 {
            return err("grad_steps_per_episode must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observation_rejects_out_of_range_and_wrong_shape() {
        assert!(Observation::new(1, 2, 1, vec![0.0, 1.0]).is_ok());
        assert!(matches!(
            Observation::new(1, 2, 1, vec![0.0, 1.5]),
            Err(PdfError::InvalidValue(_))
        ));
        assert!(matches!(
            Observation::new(1, 2, 1, vec![0.0, f32::NAN]),
            Err(PdfError::InvalidValue(_))
        ));
        assert!(matches!(
            Observation::new(2, 2, 1, vec![0.0; 3]),
            Err(PdfError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn instruction_padding_rules() {
        let i = Instruction::new(&[3, 4], 8, 4).unwrap();
        assert_eq!(i.tokens(), &[3, 4, 0, 0]);
        assert!(Instruction::new(&[3, 9], 8, 4).is_err());
        assert!(Instruction::new(&[3, 0, 4], 8, 4).is_err());
        assert!(Instruction::new(&[1, 2, 3, 4, 5], 8, 4).is_err());
    }

    #[test]
    fn action_range_checked() {
        assert!(Action::new(vec![0, 15], 16).is_ok());
        assert!(Action::new(vec![0, 16], 16).is_err());
        assert!(Action::new(vec![], 16).is_err());
    }

    #[test]
    fn logits_reject_non_finite() {
        assert!(LogitsMatrix::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(LogitsMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let m = LogitsMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1e3, 0.0, 1e3]]).unwrap();
        for row in m.softmax().chunks(3) {
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn baseline_mode_parses() {
        assert_eq!("fixed:0.5".parse::<BaselineMode>().unwrap(), BaselineMode::Fixed(0.5));
        assert_eq!(
            "mean:3".parse::<BaselineMode>().unwrap(),
            BaselineMode::RunningMean { window: 3 }
        );
        assert!("mean:0".parse::<BaselineMode>().is_err());
        assert!("median:3".parse::<BaselineMode>().is_err());
    }

    #[test]
    fn hyperparams_validate_ranges() {
        assert!(HyperParams::default().validate().is_ok());
        let hp = HyperParams {
            lambda: -1.0,
            ..HyperParams::default()
        };
        assert!(hp.validate().is_err());
        let hp = HyperParams {
            batch_size: 0,
            ..HyperParams::default()
        };
        assert!(hp.validate().is_err());
    }
}
