//! Rendered gridworld pick-and-place with delayed feedback.
//!
//! Each cell is one pixel with three channels: agent (1.0, or 0.5 while
//! holding an object), object color, goal.
//! Actions are token vectors: `[dx, dy, gripper, reserved...]`, where the
//! center token `K / 2` means "no motion" or "keep gripper", tokens above it
//! close the gripper and tokens below open it.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PdfError, Result};
use crate::policy::{DemoStep, Demonstration};
use crate::types::{Action, Feedback, Instruction, Observation};

pub const CHANNELS: usize = 3;
pub const AGENT_CHANNEL: usize = 0;
pub const OBJECT_CHANNEL: usize = 1;
pub const GOAL_CHANNEL: usize = 2;
const HOLDING_INTENSITY: f32 = 0.5;

pub const NUM_KINDS: usize = 3;
pub const KIND_COLORS: [f32; NUM_KINDS] = [0.35, 0.65, 1.0];

pub const VOCAB: usize = 8;
pub const INSTRUCTION_LEN: usize = 4;
const TOKEN_PICK: u32 = 1;
const TOKEN_KIND0: u32 = 2;
const TOKEN_PLACE: u32 = 5;
const TOKEN_GOAL: u32 = 6;

/// Grid cell, `(x, y)`.
pub type Cell = (usize, usize);

fn chebyshev(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvObject {
    pub kind: usize,
    pub position: Cell,
    pub color: f32,
}

/// Distribution shift applied at reset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Shift {
    #[default]
    None,
    /// Target displaced by at most `max_cells` (Chebyshev), never zero.
    PoseShift { max_cells: usize },
    /// Extra non-target objects on free cells.
    Distractor { count: usize },
    /// Target is not rendered; dynamics are unchanged.
    MaskTarget,
}

impl FromStr for Shift {
    type Err = PdfError;

    /// `none`, `pose_shift:<n>`, `distractor:<n>` or `mask_target`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || PdfError::InvalidConfig(format!("unknown shift {s:?}"));
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let n = |a: Option<&str>| a.and_then(|a| a.parse::<usize>().ok()).ok_or_else(bad);
        match kind {
            "none" => Ok(Shift::None),
            "pose_shift" => Ok(Shift::PoseShift { max_cells: n(arg)? }),
            "distractor" => Ok(Shift::Distractor { count: n(arg)? }),
            "mask_target" => Ok(Shift::MaskTarget),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shift::None => write!(f, "none"),
            Shift::PoseShift { max_cells } => write!(f, "pose_shift:{max_cells}"),
            Shift::Distractor { count } => write!(f, "distractor:{count}"),
            Shift::MaskTarget => write!(f, "mask_target"),
        }
    }
}

impl Serialize for Shift {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Shift {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// 1 on success, else 0.
    #[default]
    Binary,
    /// Success gives 1; otherwise partial credit for progress, in `[0, 0.5]`.
    Shaped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// `(height, width)` in cells.
    pub grid: (usize, usize),
    pub objects: Vec<EnvObject>,
    pub target_kind: usize,
    pub agent_start: Cell,
    pub goal: Cell,
    pub horizon: usize,
    pub shift: Shift,
    pub seed: u64,
    pub num_tokens: usize,
    pub feedback: FeedbackMode,
}

impl EnvConfig {
    /// Canonical layout of task `task_id`: three objects of distinct kinds, a
    /// goal cell and an agent start, all on distinct cells.
    pub fn task(task_id: u64, grid: (usize, usize), horizon: usize) -> Result<Self> {
        let (h, w) = grid;
        if h < 4 || w < 4 {
            return Err(PdfError::InvalidConfig(format!("grid {h}x{w} too small (min 4x4)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(task_id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7a5c);
        let cell = |rng: &mut ChaCha8Rng| (rng.random_range(0..w), rng.random_range(0..h));
        loop {
            let agent_start = cell(&mut rng);
            let goal = cell(&mut rng);
            let positions: Vec<Cell> = (0..NUM_KINDS).map(|_| cell(&mut rng)).collect();
            let target_kind = rng.random_range(0..NUM_KINDS);
            let mut all = positions.clone();
            all.push(agent_start);
            all.push(goal);
            let mut dedup = all.clone();
            dedup.sort();
            dedup.dedup();
            let target = positions[target_kind];
            if dedup.len() != all.len() || chebyshev(target, agent_start) < 2 || chebyshev(target, goal) < 2 {
                continue;
            }
            let objects = positions
                .iter()
                .enumerate()
                .map(|(kind, &position)| EnvObject {
                    kind,
                    position,
                    color: KIND_COLORS[kind],
                })
                .collect();
            return Ok(Self {
                grid,
                objects,
                target_kind,
                agent_start,
                goal,
                horizon,
                shift: Shift::None,
                seed: 0,
                num_tokens: 16,
                feedback: FeedbackMode::Binary,
            });
        }
    }

    pub fn with_shift(mut self, shift: Shift, seed: u64) -> Self {
        self.shift = shift;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        let inside = |c: Cell| c.0 < w && c.1 < h;
        let err = |m: String| Err(PdfError::InvalidConfig(m));
        if h == 0 || w == 0 {
            return err("grid must be nonempty".into());
        }
        if self.horizon == 0 {
            return err("horizon must be >= 1".into());
        }
        if self.num_tokens < 3 {
            return err("num_tokens must be >= 3".into());
        }
        if !inside(self.agent_start) || !inside(self.goal) {
            return err("agent start and goal must lie inside the grid".into());
        }
        if let Some(o) = self.objects.iter().find(|o| !inside(o.position)) {
            return err(format!("object at {:?} outside the grid", o.position));
        }
        if let Some(o) = self.objects.iter().find(|o| !(0.0..=1.0).contains(&o.color)) {
            return err(format!("object color {} outside [0, 1]", o.color));
        }
        if !self.objects.iter().any(|o| o.kind == self.target_kind) {
            return err(format!("no object of target kind {}", self.target_kind));
        }
        Ok(())
    }

    pub fn instruction(&self) -> Instruction {
        let tokens = [TOKEN_PICK, TOKEN_KIND0 + self.target_kind as u32, TOKEN_PLACE, TOKEN_GOAL];
        Instruction::new(&tokens, VOCAB as u32, INSTRUCTION_LEN).expect("fixed instruction vocabulary")
    }

    fn center(&self) -> usize {
        self.num_tokens / 2
    }
}

/// Hidden environment state.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    grid: (usize, usize),
    objects: Vec<EnvObject>,
    target: usize,
    agent: Cell,
    goal: Cell,
    holding: Option<usize>,
    mask_target: bool,
    horizon: usize,
    steps: usize,
    done: bool,
    success: bool,
    center: usize,
    feedback_mode: FeedbackMode,
    initial_target: Cell,
}

/// Builds the initial state. Deterministic in the config (including its seed).
pub fn reset(config: &EnvConfig) -> Result<(Observation, Instruction, EnvState)> {
    config.validate()?;
    let (h, w) = config.grid;
    let mut objects = config.objects.clone();
    let target = objects
        .iter()
        .position(|o| o.kind == config.target_kind)
        .expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let occupied = |objects: &[EnvObject], c: Cell, skip: Option<usize>| {
        c == config.goal
            || c == config.agent_start
            || objects.iter().enumerate().any(|(i, o)| Some(i) != skip && o.position == c)
    };
    match config.shift {
        Shift::None | Shift::MaskTarget => {}
        Shift::PoseShift { max_cells } => {
            let m = max_cells as i64;
            let origin = objects[target].position;
            for _ in 0..256 {
                if m == 0 {
                    break;
                }
                let dx = rng.random_range(-m..=m);
                let dy = rng.random_range(-m..=m);
                if dx == 0 && dy == 0 {
                    continue;
                }
                let (nx, ny) = (origin.0 as i64 + dx, origin.1 as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let c = (nx as usize, ny as usize);
                if !occupied(&objects, c, Some(target)) {
                    objects[target].position = c;
                    break;
                }
            }
        }
        Shift::Distractor { count } => {
            for _ in 0..count {
                for _ in 0..256 {
                    let c = (rng.random_range(0..w), rng.random_range(0..h));
                    if occupied(&objects, c, None) {
                        continue;
                    }
                    let kind = loop {
                        let k = rng.random_range(0..NUM_KINDS);
                        if k != config.target_kind || NUM_KINDS == 1 {
                            break k;
                        }
                    };
                    objects.push(EnvObject {
                        kind,
                        position: c,
                        color: KIND_COLORS[kind],
                    });
                    break;
                }
            }
        }
    }
    let state = EnvState {
        grid: config.grid,
        initial_target: objects[target].position,
        objects,
        target,
        agent: config.agent_start,
        goal: config.goal,
        holding: None,
        mask_target: config.shift == Shift::MaskTarget,
        horizon: config.horizon,
        steps: 0,
        done: false,
        success: false,
        center: config.center(),
        feedback_mode: config.feedback,
    };
    Ok((state.render(), config.instruction(), state))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
}

impl EnvState {
    pub fn render(&self) -> Observation {
        let (h, w) = self.grid;
        let mut obs = Observation::zeros(h, w, CHANNELS);
        let mut pixels = obs.pixels().to_vec();
        let at = |c: Cell, ch: usize| (c.1 * w + c.0) * CHANNELS + ch;
        pixels[at(self.goal, GOAL_CHANNEL)] = 1.0;
        for (i, o) in self.objects.iter().enumerate() {
            if i == self.target && self.mask_target {
                continue;
            }
            let px = &mut pixels[at(o.position, OBJECT_CHANNEL)];
            *px = px.max(o.color);
        }
        pixels[at(self.agent, AGENT_CHANNEL)] = if self.holding.is_some() { HOLDING_INTENSITY } else { 1.0 };
        obs = Observation::new(h, w, CHANNELS, pixels).expect("rendered values lie in [0, 1]");
        obs
    }

    pub fn step(&mut self, action: &Action) -> Result<StepOutcome> {
        if self.done {
            return Err(PdfError::StepAfterDone);
        }
        if action.dims() < 3 {
            return Err(PdfError::shape("action with >= 3 dims", action.dims()));
        }
        let (h, w) = self.grid;
        let c = self.center as i64;
        let dx = action.token(0) as i64 - c;
        let dy = action.token(1) as i64 - c;
        self.agent = (
            (self.agent.0 as i64 + dx).clamp(0, w as i64 - 1) as usize,
            (self.agent.1 as i64 + dy).clamp(0, h as i64 - 1) as usize,
        );
        if let Some(i) = self.holding {
            self.objects[i].position = self.agent;
        }
        let grip = action.token(2);
        if grip > self.center {
            if self.holding.is_none() {
                self.holding = self.objects.iter().position(|o| o.position == self.agent);
            }
        } else if grip < self.center {
            if let Some(i) = self.holding.take() {
                self.done = true;
                self.success = i == self.target && self.agent == self.goal;
            }
        }
        self.steps += 1;
        if self.steps >= self.horizon {
            self.done = true;
        }
        Ok(StepOutcome {
            observation: self.render(),
            done: self.done,
        })
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn agent(&self) -> Cell {
        self.agent
    }

    pub fn target_position(&self) -> Cell {
        self.objects[self.target].position
    }

    /// Target position right after reset (after any pose shift).
    pub fn initial_target(&self) -> Cell {
        self.initial_target
    }

    pub fn holding_target(&self) -> bool {
        self.holding == Some(self.target)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Delayed feedback; only available once the episode is over.
    pub fn feedback(&self) -> Result<Feedback> {
        if !self.done {
            return Err(PdfError::CalledBeforeDone);
        }
        let value = match (self.success, self.feedback_mode) {
            (true, _) => 1.0,
            (false, FeedbackMode::Binary) => 0.0,
            (false, FeedbackMode::Shaped) => {
                let span = self.grid.0.max(self.grid.1) as f64;
                let to_target = chebyshev(self.agent, self.target_position()) as f64;
                if self.holding_target() {
                    0.25 + 0.25 * (1.0 - chebyshev(self.agent, self.goal) as f64 / span)
                } else {
                    0.25 * (1.0 - to_target / span)
                }
            }
        };
        Feedback::new(value)
    }

    /// Success flag, only available once the episode is over.
    pub fn success(&self) -> Result<bool> {
        if !self.done {
            return Err(PdfError::CalledBeforeDone);
        }
        Ok(self.success)
    }

    /// The scripted expert's action in the current state.
    pub fn expert_action(&self) -> Action {
        let c = self.center;
        let toward = |from: usize, to: usize| match from.cmp(&to) {
            std::cmp::Ordering::Less => c + 1,
            std::cmp::Ordering::Equal => c,
            std::cmp::Ordering::Greater => c - 1,
        };
        let mut tokens = vec![c; 4];
        let dest = if self.holding_target() {
            self.goal
        } else {
            self.target_position()
        };
        if self.agent == dest {
            tokens[2] = if self.holding_target() { c / 2 } else { c + c / 2 };
        } else {
            tokens[0] = toward(self.agent.0, dest.0);
            tokens[1] = toward(self.agent.1, dest.1);
        }
        Action::from_trusted(tokens)
    }
}

/// Result of one finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps_taken: usize,
    pub feedback: Feedback,
    pub trace: Vec<(Observation, Action)>,
}

/// Expert demonstration on the canonical (unshifted) layout.
pub fn scripted_expert(config: &EnvConfig) -> Result<Demonstration> {
    if config.shift != Shift::None {
        return Err(PdfError::UnsupportedShift(config.shift.to_string()));
    }
    let (mut obs, instruction, mut state) = reset(config)?;
    let mut steps = Vec::new();
    while !state.done() {
        let action = state.expert_action();
        let next = state.step(&action)?;
        steps.push(DemoStep {
            observation: obs,
            instruction: instruction.clone(),
            action,
        });
        obs = next.observation;
    }
    if !state.success()? {
        return Err(PdfError::InvalidConfig(format!(
            "horizon {} too short for the expert on this layout",
            config.horizon
        )));
    }
    Demonstration::new(steps)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    t: usize,
    action: &'a [usize],
    observation: &'a [f32],
}

/// Writes a trace as JSON lines, one `{t, action, observation}` object per step.
pub fn write_trace_jsonl(trace: &[(Observation, Action)], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| PdfError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for (t, (obs, action)) in trace.iter().enumerate() {
        let line = serde_json::to_string(&TraceLine {
            t,
            action: action.tokens(),
            observation: obs.pixels(),
        })
        .expect("trace lines serialize");
        writeln!(out, "{line}").map_err(|e| PdfError::io(path, e))?;
    }
    out.flush().map_err(|e| PdfError::io(path, e))
}
