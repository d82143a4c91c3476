use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::env::{self, EnvConfig, FeedbackMode, Shift};
use crate::error::{PdfError, Result};
use crate::perturb::VoteMode;
use crate::policy::{Arch, BcOptions};
use crate::types::HyperParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Greedy frozen policy: no views, no head.
    Baseline,
    /// Voting over augmented views; the head is never trained.
    PdfWoDf,
    /// Head trained from feedback; original view only.
    PdfWoDa,
    /// Full method without the KL term.
    PdfWoKl,
    /// Full method without the REINFORCE term.
    PdfWoRe,
    PdfFull,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::PdfWoDf,
        Variant::PdfWoDa,
        Variant::PdfWoKl,
        Variant::PdfWoRe,
        Variant::PdfFull,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::PdfWoDf => "pdf_wo_df",
            Variant::PdfWoDa => "pdf_wo_da",
            Variant::PdfWoKl => "pdf_wo_kl",
            Variant::PdfWoRe => "pdf_wo_re",
            Variant::PdfFull => "pdf_full",
        }
    }

    pub fn uses_views(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::PdfWoDa)
    }

    pub fn adapts(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::PdfWoDf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = PdfError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PdfError::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSettings {
    /// `[height, width]` in cells.
    pub grid: [usize; 2],
    pub horizon: usize,
    pub shift: Shift,
    pub feedback: FeedbackMode,
}

impl Default for EnvSettings {
    fn default() -> Self {
        Self {
            grid: [8, 8],
            horizon: 30,
            shift: Shift::PoseShift { max_cells: 2 },
            feedback: FeedbackMode::Binary,
        }
    }
}

impl EnvSettings {
    pub fn grid(&self) -> (usize, usize) {
        (self.grid[0], self.grid[1])
    }

    /// Canonical layout of `task`, with this section's shift applied under `seed`.
    pub fn task_config(&self, task: u64, seed: u64, num_tokens: usize) -> Result<EnvConfig> {
        let mut cfg = EnvConfig::task(task, self.grid(), self.horizon)?.with_shift(self.shift, seed);
        cfg.num_tokens = num_tokens;
        cfg.feedback = self.feedback;
        Ok(cfg)
    }

    /// The architecture header must agree with what the environment renders.
    pub fn check_arch(&self, arch: &Arch) -> Result<()> {
        let (h, w) = self.grid();
        if arch.height != h || arch.width != w || arch.channels != env::CHANNELS {
            return Err(PdfError::InvalidConfig(format!(
                "architecture expects {}x{}x{} observations, environment renders {h}x{w}x{}",
                arch.height,
                arch.width,
                arch.channels,
                env::CHANNELS
            )));
        }
        if arch.vocab < env::VOCAB || arch.max_len != env::INSTRUCTION_LEN {
            return Err(PdfError::InvalidConfig(format!(
                "architecture instruction shape (vocab {}, length {}) cannot hold the environment's (vocab {}, length {})",
                arch.vocab,
                arch.max_len,
                env::VOCAB,
                env::INSTRUCTION_LEN
            )));
        }
        if arch.dims < 3 || arch.tokens < 3 {
            return Err(PdfError::InvalidConfig("actions need >= 3 dims and >= 3 tokens".into()));
        }
        Ok(())
    }
}

/// Everything `run_variant` needs besides the frozen snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub env: EnvSettings,
    pub hp: HyperParams,
    pub augment: AugmentConfig,
    pub vote: VoteMode,
    /// Adaptation episodes per (seed, task).
    pub episodes: usize,
    pub eval_rollouts: usize,
    pub seeds: Vec<u64>,
    pub tasks: Vec<u64>,
    pub head_hidden: usize,
    pub buffer_capacity: usize,
    pub persist_buffer: bool,
    /// When false the adaptation phase is skipped even for adaptive variants.
    pub adapt: bool,
    /// Keep updating the head during evaluation rollouts.
    pub adapt_during_eval: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let run = RunSection::default();
        Self {
            variant: run.variant,
            env: EnvSettings::default(),
            hp: HyperParams::default(),
            augment: AugmentConfig::default(),
            vote: run.vote,
            episodes: run.episodes,
            eval_rollouts: run.eval_rollouts,
            seeds: run.seeds,
            tasks: run.tasks,
            head_hidden: run.head_hidden,
            buffer_capacity: run.buffer_capacity,
            persist_buffer: run.persist_buffer,
            adapt: run.adapt,
            adapt_during_eval: run.adapt_during_eval,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(PdfError::InvalidConfig(m.into()));
        if self.episodes == 0 {
            return err("episodes must be >= 1");
        }
        if self.eval_rollouts == 0 {
            return err("eval_rollouts must be >= 1");
        }
        if self.seeds.is_empty() {
            return err("seeds must be nonempty");
        }
        if self.tasks.is_empty() {
            return err("tasks must be nonempty");
        }
        if self.head_hidden == 0 {
            return err("head_hidden must be >= 1");
        }
        if self.env.horizon == 0 {
            return err("env.horizon must be >= 1");
        }
        self.hp.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub variant: Variant,
    pub vote: VoteMode,
    pub episodes: usize,
    pub eval_rollouts: usize,
    pub seeds: Vec<u64>,
    pub tasks: Vec<u64>,
    pub head_hidden: usize,
    pub buffer_capacity: usize,
    pub persist_buffer: bool,
    pub adapt: bool,
    pub adapt_during_eval: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            variant: Variant::PdfFull,
            vote: VoteMode::DimWise,
            episodes: 50,
            eval_rollouts: 50,
            seeds: (0..10).collect(),
            tasks: (0..10).collect(),
            head_hidden: 32,
            buffer_capacity: 4096,
            persist_buffer: false,
            adapt: true,
            adapt_during_eval: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcSection {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Tasks whose canonical layouts supply the demonstrations.
    pub tasks: Vec<u64>,
}

impl Default for BcSection {
    fn default() -> Self {
        let o = BcOptions::default();
        Self {
            epochs: o.epochs,
            seed: o.seed,
            batch_size: o.batch_size,
            learning_rate: o.learning_rate,
            tasks: (0..10).collect(),
        }
    }
}

impl BcSection {
    pub fn options(&self) -> BcOptions {
        BcOptions {
            epochs: self.epochs,
            seed: self.seed,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }
}

/// The on-disk configuration file (TOML, one table per section).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    /// Path of the frozen policy snapshot.
    pub snapshot: Option<PathBuf>,
    pub experiment: RunSection,
    pub env: EnvSettings,
    pub hp: HyperParams,
    pub augment: AugmentConfig,
    pub arch: Arch,
    pub bc: BcSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PdfError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PdfError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        let r = &self.experiment;
        ExperimentConfig {
            variant: r.variant,
            env: self.env.clone(),
            hp: self.hp.clone(),
            augment: self.augment.clone(),
            vote: r.vote,
            episodes: r.episodes,
            eval_rollouts: r.eval_rollouts,
            seeds: r.seeds.clone(),
            tasks: r.tasks.clone(),
            head_hidden: r.head_hidden,
            buffer_capacity: r.buffer_capacity,
            persist_buffer: r.persist_buffer,
            adapt: r.adapt,
            adapt_during_eval: r.adapt_during_eval,
        }
    }
}
