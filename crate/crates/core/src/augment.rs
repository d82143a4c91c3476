//! Entropy-based uncertainty, the augmentation budget, and the pixel
//! augmentation family used to build extra views of an observation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PdfError, Result};
use crate::types::{log_softmax, softmax, LogitsMatrix, Observation, Rounding, UncertaintyAggregate};

/// Normalized Shannon entropy of one row of logits, in `[0, 1]`.
pub fn normalized_entropy(row: &[f64]) -> f64 {
    if row.len() < 2 {
        return 0.0;
    }
    let p = softmax(row);
    let logp = log_softmax(row);
    let h: f64 = -p.iter().zip(&logp).map(|(p, lp)| if *p > 0.0 { p * lp } else { 0.0 }).sum::<f64>();
    (h / (row.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Decision uncertainty: per-dimension normalized entropy, combined across
/// action dimensions by `aggregate`.
pub fn uncertainty(logits: &LogitsMatrix, aggregate: UncertaintyAggregate) -> f64 {
    let per_dim = logits.rows().map(normalized_entropy);
    match aggregate {
        UncertaintyAggregate::Mean => per_dim.sum::<f64>() / logits.dims() as f64,
        UncertaintyAggregate::Max => per_dim.fold(0.0, f64::max),
    }
}

/// Number of augmented views for uncertainty `u`, in `[0, n_max]`.
pub fn budget(u: f64, n_max: usize, rounding: Rounding) -> usize {
    let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };
    let raw = n_max as f64 * u;
    let n = match rounding {
        Rounding::Floor => raw.floor(),
        Rounding::Round => raw.round_ties_even(),
    };
    (n.max(0.0) as usize).min(n_max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    PixelShift,
    GaussianNoise,
    Brightness,
    OcclusionPatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    PixelShift { dx: i32, dy: i32 },
    GaussianNoise { sigma: f64 },
    Brightness { delta: f64 },
    OcclusionPatch { x: usize, y: usize, w: usize, h: usize },
}

/// One concrete transformation plus the seed for any randomness it needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub transform: Transform,
    pub seed: u64,
}

/// Parameter ranges of the augmentation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Kinds sampled uniformly per view.
    pub kinds: Vec<AugmentKind>,
    pub max_shift: i32,
    pub max_sigma: f64,
    pub max_brightness: f64,
    /// Largest occluded fraction of the image area.
    pub max_occlusion_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            kinds: vec![
                AugmentKind::PixelShift,
                AugmentKind::GaussianNoise,
                AugmentKind::Brightness,
                AugmentKind::OcclusionPatch,
            ],
            max_shift: 2,
            max_sigma: 0.05,
            max_brightness: 0.1,
            max_occlusion_frac: 0.15,
        }
    }
}

impl AugmentConfig {
    /// Every view is an exact copy of the original (noise with `sigma = 0`).
    pub fn identity() -> Self {
        Self {
            kinds: vec![AugmentKind::GaussianNoise],
            max_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() {
            return Err(PdfError::InvalidConfig("augment.kinds must be nonempty".into()));
        }
        if self.max_shift < 0 {
            return Err(PdfError::InvalidConfig("augment.max_shift must be >= 0".into()));
        }
        if !(self.max_sigma >= 0.0 && self.max_sigma.is_finite()) {
            return Err(PdfError::InvalidConfig("augment.max_sigma must be >= 0".into()));
        }
        if !(self.max_brightness >= 0.0 && self.max_brightness.is_finite()) {
            return Err(PdfError::InvalidConfig("augment.max_brightness must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.max_occlusion_frac) {
            return Err(PdfError::InvalidConfig("augment.max_occlusion_frac must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Draws one spec valid for an `height × width` image.
    pub fn sample<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> AugmentSpec {
        let kind = self.kinds[rng.random_range(0..self.kinds.len())];
        let transform = match kind {
            AugmentKind::PixelShift => {
                let mx = self.max_shift.min(width as i32 - 1).max(0);
                let my = self.max_shift.min(height as i32 - 1).max(0);
                Transform::PixelShift {
                    dx: rng.random_range(-mx..=mx),
                    dy: rng.random_range(-my..=my),
                }
            }
            AugmentKind::GaussianNoise => Transform::GaussianNoise {
                sigma: if self.max_sigma > 0.0 {
                    rng.random_range(0.0..=self.max_sigma)
                } else {
                    0.0
                },
            },
            AugmentKind::Brightness => Transform::Brightness {
                delta: if self.max_brightness > 0.0 {
                    rng.random_range(-self.max_brightness..=self.max_brightness)
                } else {
                    0.0
                },
            },
            AugmentKind::OcclusionPatch => {
                let max_area = ((height * width) as f64 * self.max_occlusion_frac).floor() as usize;
                if max_area == 0 {
                    Transform::OcclusionPatch { x: 0, y: 0, w: 0, h: 0 }
                } else {
                    let w = rng.random_range(1..=width.min(max_area));
                    let h = rng.random_range(1..=height.min(max_area / w).max(1));
                    Transform::OcclusionPatch {
                        x: rng.random_range(0..=width - w),
                        y: rng.random_range(0..=height - h),
                        w,
                        h,
                    }
                }
            }
        };
        AugmentSpec {
            transform,
            seed: rng.next_u64(),
        }
    }
}

impl AugmentSpec {
    /// Applies the transform; every output pixel is clamped to `[0, 1]`.
    pub fn apply(&self, obs: &Observation) -> Observation {
        let (h, w, c) = obs.shape();
        let src = obs.pixels();
        let pixels: Vec<f32> = match self.transform {
            Transform::PixelShift { dx, dy } => {
                let mut out = vec![0.0f32; src.len()];
                for y in 0..h {
                    let sy = y as i64 - dy as i64;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as i64 - dx as i64;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let from = obs.index(sy as usize, sx as usize, 0);
                        let to = obs.index(y, x, 0);
                        out[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
                out
            }
            Transform::GaussianNoise { sigma } => {
                if sigma == 0.0 {
                    src.to_vec()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                    src.iter()
                        .map(|v| (f64::from(*v) + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32)
                        .collect()
                }
            }
            Transform::Brightness { delta } => src
                .iter()
                .map(|v| (f64::from(*v) + delta).clamp(0.0, 1.0) as f32)
                .collect(),
            Transform::OcclusionPatch { x, y, w: pw, h: ph } => {
                let mut out = src.to_vec();
                for yy in y..(y + ph).min(h) {
                    for xx in x..(x + pw).min(w) {
                        let i = obs.index(yy, xx, 0);
                        out[i..i + c].fill(0.0);
                    }
                }
                out
            }
        };
        Observation::new(h, w, c, pixels).expect("augmentations preserve shape and range")
    }
}

/// `n` augmented views of `observation`, excluding the original.
pub fn generate_views(observation: &Observation, n: usize, rng_seed: u64, config: &AugmentConfig) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..n)
        .map(|_| {
            config
                .sample(observation.height(), observation.width(), &mut rng)
                .apply(observation)
        })
        .collect()
}
