use std::time::Instant;

use rayon::prelude::*;

use super::config::{EnvSettings, ExperimentConfig, Variant};
use super::metrics::MetricsRow;
use crate::adapt::{adapt, BaselineTracker, LossSettings, RolloutBuffer};
use crate::augment::{budget, generate_views, uncertainty, AugmentConfig};
use crate::env::{reset, scripted_expert, EnvConfig, Shift};
use crate::error::{PdfError, Result};
use crate::perturb::{decode_candidates, perturbed_logits, vote, PerturbationHead, VoteMode};
use crate::policy::{train_bc, Arch, BcOptions, PolicySnapshot};
use crate::types::{Action, Feature, Feedback, HyperParams, Instruction, LogitsMatrix, Observation, Rounding, RolloutRecord, UncertaintyAggregate};

const TAG_LAYOUT: u64 = 1;
const TAG_HEAD: u64 = 2;
const TAG_ADAPT: u64 = 3;
const TAG_EVAL: u64 = 4;
const TAG_SGD: u64 = 5;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of ids, used for every derived seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Per-step decision settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionSettings {
    pub lambda: f64,
    pub n_max: usize,
    pub rounding: Rounding,
    pub aggregate: UncertaintyAggregate,
    pub vote: VoteMode,
    pub augment: AugmentConfig,
    /// False forces the budget to zero.
    pub use_views: bool,
}

impl DecisionSettings {
    pub fn new(hp: &HyperParams, augment: &AugmentConfig, vote: VoteMode) -> Self {
        Self {
            lambda: hp.lambda,
            n_max: hp.n_max,
            rounding: hp.rounding,
            aggregate: hp.uncertainty,
            vote,
            augment: augment.clone(),
            use_views: true,
        }
    }

    pub fn for_variant(variant: Variant, hp: &HyperParams, augment: &AugmentConfig, vote: VoteMode) -> Self {
        let mut s = Self::new(hp, augment, vote);
        s.use_views = variant.uses_views();
        if variant == Variant::Baseline {
            s.lambda = 0.0;
        }
        s
    }
}

/// What the controller did at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub uncertainty: f64,
    pub budget: usize,
    /// Candidate actions, original view first.
    pub candidates: Vec<Action>,
    /// `(feature, perturbed logits)` per view, original first.
    pub views: Vec<(Feature, LogitsMatrix)>,
}

impl Decision {
    pub fn records(&self, timestep: usize) -> impl Iterator<Item = RolloutRecord> + '_ {
        self.views.iter().enumerate().map(move |(i, (f, l))| RolloutRecord {
            feature: f.clone(),
            final_logits: l.clone(),
            executed_action: self.action.clone(),
            timestep,
            view_index: i,
        })
    }
}

/// Uncertainty from the frozen logits of the original view sets the budget;
/// each view is encoded, perturbed by the head and decoded greedily; the
/// candidates are merged by voting.
pub fn decide(
    snapshot: &PolicySnapshot,
    head: &PerturbationHead,
    observation: &Observation,
    instruction: &Instruction,
    settings: &DecisionSettings,
    view_seed: u64,
) -> Result<Decision> {
    let feature = snapshot.encode(observation, instruction)?;
    let base = snapshot.lm_logits(&feature)?;
    let u = uncertainty(&base, settings.aggregate);
    let n = if settings.use_views {
        budget(u, settings.n_max, settings.rounding)
    } else {
        0
    };
    let mut views = Vec::with_capacity(n + 1);
    let original = perturbed_logits(&base, head, &feature, settings.lambda)?;
    views.push((feature, original));
    for view in generate_views(observation, n, view_seed, &settings.augment) {
        let f = snapshot.encode(&view, instruction)?;
        let b = snapshot.lm_logits(&f)?;
        let l = perturbed_logits(&b, head, &f, settings.lambda)?;
        views.push((f, l));
    }
    let logits: Vec<LogitsMatrix> = views.iter().map(|(_, l)| l.clone()).collect();
    let candidates = decode_candidates(&logits)?;
    let action = vote(&candidates, settings.vote)?;
    Ok(Decision {
        action,
        uncertainty: u,
        budget: n,
        candidates,
        views,
    })
}

/// Summary of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRun {
    pub success: bool,
    pub feedback: Feedback,
    pub actions: Vec<Action>,
    pub uncertainty_sum: f64,
    pub budget_sum: usize,
}

impl EpisodeRun {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }
}

/// Rolls out one episode. Records for every view are pushed into `buffer` when given.
pub fn run_episode(
    env: &EnvConfig,
    snapshot: &PolicySnapshot,
    head: &PerturbationHead,
    settings: &DecisionSettings,
    episode_seed: u64,
    mut buffer: Option<&mut RolloutBuffer>,
) -> Result<EpisodeRun> {
    let (mut obs, instruction, mut state) = reset(env)?;
    let mut actions = Vec::new();
    let mut uncertainty_sum = 0.0;
    let mut budget_sum = 0;
    while !state.done() {
        let t = state.steps();
        let d = decide(snapshot, head, &obs, &instruction, settings, derive_seed(&[episode_seed, t as u64]))?;
        uncertainty_sum += d.uncertainty;
        budget_sum += d.budget;
        if let Some(buf) = buffer.as_deref_mut() {
            for r in d.records(t) {
                buf.push(r);
            }
        }
        obs = state.step(&d.action)?.observation;
        actions.push(d.action);
    }
    Ok(EpisodeRun {
        success: state.success()?,
        feedback: state.feedback()?,
        actions,
        uncertainty_sum,
        budget_sum,
    })
}

/// Outcome of one (seed, task) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskOutcome {
    pub row: MetricsRow,
    pub adaptation: Vec<EpisodeRun>,
    pub evaluation: Vec<EpisodeRun>,
    /// Head after the run.
    pub head: PerturbationHead,
}

fn loss_settings(variant: Variant, hp: &HyperParams) -> LossSettings {
    let mut s = LossSettings::from_hp(hp);
    match variant {
        Variant::PdfWoKl => s.lambda_kl = 0.0,
        Variant::PdfWoRe => s.reinforce_weight = 0.0,
        _ => {}
    }
    s
}

/// Adaptation on the shifted layout of `task`, then evaluation rollouts with
/// the head frozen (unless `adapt_during_eval`).
pub fn run_task(snapshot: &PolicySnapshot, cfg: &ExperimentConfig, seed: u64, task: u64) -> Result<TaskOutcome> {
    let start = Instant::now();
    let arch = snapshot.arch();
    let env = cfg.env.task_config(task, derive_seed(&[seed, task, TAG_LAYOUT]), arch.tokens)?;
    let settings = DecisionSettings::for_variant(cfg.variant, &cfg.hp, &cfg.augment, cfg.vote);
    let losses = loss_settings(cfg.variant, &cfg.hp);
    let mut head = PerturbationHead::new(
        arch.feature,
        cfg.head_hidden,
        arch.dims,
        arch.tokens,
        derive_seed(&[seed, task, TAG_HEAD]),
    );
    let mut buffer = if cfg.persist_buffer {
        RolloutBuffer::persistent(cfg.buffer_capacity)
    } else {
        RolloutBuffer::new(cfg.buffer_capacity)
    };
    let mut tracker = BaselineTracker::from_hp(&cfg.hp);
    let learns = cfg.variant.adapts();

    let mut episode = |phase: u64, i: usize, update: bool, head: &mut PerturbationHead| -> Result<EpisodeRun> {
        let ep_seed = derive_seed(&[seed, task, phase, i as u64]);
        let run = run_episode(&env, snapshot, head, &settings, ep_seed, update.then_some(&mut buffer))?;
        if update {
            adapt(
                head,
                &mut buffer,
                snapshot,
                run.feedback,
                &mut tracker,
                &cfg.hp,
                &losses,
                derive_seed(&[seed, task, TAG_SGD, phase, i as u64]),
            )?;
        }
        Ok(run)
    };

    let mut adaptation = Vec::new();
    if learns && cfg.adapt {
        for i in 0..cfg.episodes {
            adaptation.push(episode(TAG_ADAPT, i, true, &mut head)?);
        }
    }
    let mut evaluation = Vec::with_capacity(cfg.eval_rollouts);
    for i in 0..cfg.eval_rollouts {
        evaluation.push(episode(TAG_EVAL, i, learns && cfg.adapt_during_eval, &mut head)?);
    }

    let rate = |runs: &[EpisodeRun]| {
        if runs.is_empty() {
            0.0
        } else {
            runs.iter().filter(|r| r.success).count() as f64 / runs.len() as f64
        }
    };
    let steps: usize = evaluation.iter().map(EpisodeRun::steps).sum();
    let row = MetricsRow {
        variant: cfg.variant,
        vote: cfg.vote,
        n_max: cfg.hp.n_max,
        seed,
        task,
        success_rate: rate(&evaluation),
        adapt_success_rate: rate(&adaptation),
        mean_uncertainty: evaluation.iter().map(|r| r.uncertainty_sum).sum::<f64>() / steps as f64,
        mean_budget: evaluation.iter().map(|r| r.budget_sum).sum::<usize>() as f64 / steps as f64,
        episodes_adapted: adaptation.len(),
        wall_time_ms: start.elapsed().as_millis() as u64,
    };
    Ok(TaskOutcome {
        row,
        adaptation,
        evaluation,
        head,
    })
}

/// All (seed, task) pairs in config order; pairs run in parallel, results are
/// independent of scheduling.
pub fn run_variant_outcomes(snapshot: &PolicySnapshot, cfg: &ExperimentConfig) -> Result<Vec<TaskOutcome>> {
    cfg.validate()?;
    cfg.env.check_arch(snapshot.arch())?;
    let pairs: Vec<(u64, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.tasks.iter().map(move |&t| (s, t)))
        .collect();
    pairs
        .par_iter()
        .map(|&(s, t)| run_task(snapshot, cfg, s, t))
        .collect()
}

/// One metrics row per (seed, task).
pub fn run_variant(snapshot: &PolicySnapshot, cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    Ok(run_variant_outcomes(snapshot, cfg)?
        .into_iter()
        .map(|o| o.row)
        .collect())
}

/// Runs `cfg` once per budget cap; rows are tagged with their `n_max`.
pub fn budget_sweep(snapshot: &PolicySnapshot, cfg: &ExperimentConfig, budgets: &[usize]) -> Result<Vec<MetricsRow>> {
    if budgets.is_empty() {
        return Err(PdfError::EmptyInput("budgets"));
    }
    let mut rows = Vec::new();
    for &n in budgets {
        let mut c = cfg.clone();
        c.hp.n_max = n;
        rows.extend(run_variant(snapshot, &c)?);
    }
    Ok(rows)
}

/// Runs `cfg` under dimension-wise and then action-wise voting.
pub fn compare_voting(snapshot: &PolicySnapshot, cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for mode in [VoteMode::DimWise, VoteMode::ActionWise] {
        let c = ExperimentConfig {
            vote: mode,
            ..cfg.clone()
        };
        rows.extend(run_variant(snapshot, &c)?);
    }
    Ok(rows)
}

/// Behavior cloning on the scripted expert's canonical demonstrations of `tasks`.
pub fn train_snapshot(arch: Arch, env: &EnvSettings, tasks: &[u64], opts: &BcOptions) -> Result<PolicySnapshot> {
    if tasks.is_empty() {
        return Err(PdfError::EmptyInput("bc tasks"));
    }
    env.check_arch(&arch)?;
    let demos = tasks
        .iter()
        .map(|&t| {
            let mut c = EnvConfig::task(t, env.grid(), env.horizon)?;
            c.num_tokens = arch.tokens;
            scripted_expert(&c)
        })
        .collect::<Result<Vec<_>>>()?;
    train_bc(&demos, arch, opts)
}

/// Greedy success rate of the frozen policy on each task under `shift`, one
/// layout per (seed, task) drawn exactly as `run_task` draws it.
pub fn greedy_success(snapshot: &PolicySnapshot, env: &EnvSettings, shift: Shift, seeds: &[u64], tasks: &[u64]) -> Result<f64> {
    let settings = DecisionSettings::for_variant(
        Variant::Baseline,
        &HyperParams::default(),
        &AugmentConfig::default(),
        VoteMode::DimWise,
    );
    let arch = snapshot.arch();
    let head = PerturbationHead::new(arch.feature, 1, arch.dims, arch.tokens, 0);
    let env = EnvSettings {
        shift,
        ..env.clone()
    };
    let mut wins = 0usize;
    let mut total = 0usize;
    for &s in seeds {
        for &t in tasks {
            let cfg = env.task_config(t, derive_seed(&[s, t, TAG_LAYOUT]), arch.tokens)?;
            let run = run_episode(&cfg, snapshot, &head, &settings, 0, None)?;
            wins += run.success as usize;
            total += 1;
        }
    }
    Ok(wins as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_depend_on_order_and_values() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
        assert_eq!(derive_seed(&[7, 3, 1]), derive_seed(&[7, 3, 1]));
    }

    #[test]
    fn loss_settings_per_variant() {
        let hp = HyperParams::default();
        assert_eq!(loss_settings(Variant::PdfWoKl, &hp).lambda_kl, 0.0);
        assert_eq!(loss_settings(Variant::PdfWoRe, &hp).reinforce_weight, 0.0);
        let full = loss_settings(Variant::PdfFull, &hp);
        assert_eq!(full.lambda_kl, hp.lambda_kl);
        assert_eq!(full.reinforce_weight, 1.0);
    }

    #[test]
    fn baseline_settings_disable_views_and_head() {
        let s = DecisionSettings::for_variant(
            Variant::Baseline,
            &HyperParams::default(),
            &AugmentConfig::default(),
            VoteMode::DimWise,
        );
        assert!(!s.use_views);
        assert_eq!(s.lambda, 0.0);
        let s = DecisionSettings::for_variant(
            Variant::PdfWoDa,
            &HyperParams::default(),
            &AugmentConfig::default(),
            VoteMode::DimWise,
        );
        assert!(!s.use_views);
        assert_eq!(s.lambda, 1.0);
    }
}
