//! The frozen base policy and the behavior-cloning trainer that produces it.
//!
//! The encoder flattens the pixel grid, appends one embedding per instruction
//! token, and runs two `tanh` layers to produce a [`Feature`]. The LM head is a
//! single affine map from the feature to `D × K` logits.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PdfError, Result};
use crate::nn::{ensure_finite, tanh_backward, tanh_in_place, Dense, DenseGrad};
use crate::types::{log_softmax, softmax, Action, Feature, Instruction, LogitsMatrix, Observation, PAD_ID};
use crate::weights::{take_tensor, Tensor};

/// Architecture header stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub embed: usize,
    pub hidden: usize,
    pub feature: usize,
    pub dims: usize,
    pub tokens: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 3,
            vocab: 8,
            max_len: 4,
            embed: 4,
            hidden: 64,
            feature: 32,
            dims: 4,
            tokens: 16,
        }
    }
}

const META_TENSOR: &str = "policy.meta";

impl Arch {
    pub fn pixel_inputs(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn encoder_inputs(&self) -> usize {
        self.pixel_inputs() + self.max_len * self.embed
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.height,
            self.width,
            self.channels,
            self.vocab,
            self.max_len,
            self.embed,
            self.hidden,
            self.feature,
            self.dims,
            self.tokens,
        ];
        if fields.contains(&0) {
            return Err(PdfError::InvalidConfig(format!("architecture has a zero dimension: {self:?}")));
        }
        // header values travel as f32
        if fields.iter().any(|f| *f > (1 << 24)) {
            return Err(PdfError::InvalidConfig("architecture dimension too large".into()));
        }
        Ok(())
    }

    fn to_tensor(self) -> Tensor {
        let data = [
            self.height,
            self.width,
            self.channels,
            self.vocab,
            self.max_len,
            self.embed,
            self.hidden,
            self.feature,
            self.dims,
            self.tokens,
        ]
        .iter()
        .map(|v| *v as f32)
        .collect();
        Tensor {
            name: META_TENSOR.into(),
            dims: vec![10],
            data,
        }
    }

    fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let v = take_tensor(tensors, META_TENSOR, &[10])?;
        if v.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
            return Err(PdfError::DimensionMismatch(format!("invalid architecture header {v:?}")));
        }
        let u = |i: usize| v[i] as usize;
        Ok(Self {
            height: u(0),
            width: u(1),
            channels: u(2),
            vocab: u(3),
            max_len: u(4),
            embed: u(5),
            hidden: u(6),
            feature: u(7),
            dims: u(8),
            tokens: u(9),
        })
    }
}

/// Frozen encoder and LM head. Nothing outside this module can mutate the
/// weights once a snapshot exists.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot {
    arch: Arch,
    /// `[vocab, embed]`; the pad row is always zero.
    embedding: Vec<f32>,
    layer1: Dense,
    layer2: Dense,
    lm_head: Dense,
}

/// Intermediate activations kept for backprop during training.
struct Trace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    feature: Vec<f64>,
    logits: Vec<f64>,
}

impl PolicySnapshot {
    /// Randomly initialized snapshot.
    pub fn init(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embedding: Vec<f32> = (0..arch.vocab * arch.embed)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        embedding[PAD_ID as usize * arch.embed..(PAD_ID as usize + 1) * arch.embed].fill(0.0);
        Ok(Self {
            arch,
            embedding,
            layer1: Dense::glorot(arch.encoder_inputs(), arch.hidden, &mut rng),
            layer2: Dense::glorot(arch.hidden, arch.feature, &mut rng),
            lm_head: Dense::glorot(arch.feature, arch.dims * arch.tokens, &mut rng),
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn embedding(&self) -> &[f32] {
        &self.embedding
    }

    pub fn encoder_layers(&self) -> (&Dense, &Dense) {
        (&self.layer1, &self.layer2)
    }

    pub fn lm_head(&self) -> &Dense {
        &self.lm_head
    }

    fn encoder_input(&self, observation: &Observation, instruction: &Instruction) -> Result<Vec<f64>> {
        let a = &self.arch;
        if observation.shape() != (a.height, a.width, a.channels) {
            return Err(PdfError::shape(
                format!("observation {}x{}x{}", a.height, a.width, a.channels),
                format!("{:?}", observation.shape()),
            ));
        }
        if instruction.len() != a.max_len {
            return Err(PdfError::shape(
                format!("instruction of length {}", a.max_len),
                instruction.len(),
            ));
        }
        let mut input = Vec::with_capacity(a.encoder_inputs());
        input.extend(observation.pixels().iter().map(|p| f64::from(*p)));
        for &tok in instruction.tokens() {
            let tok = tok as usize;
            if tok >= a.vocab {
                return Err(PdfError::InvalidValue(format!("token {tok} outside vocabulary {}", a.vocab)));
            }
            input.extend(self.embedding[tok * a.embed..(tok + 1) * a.embed].iter().map(|e| f64::from(*e)));
        }
        Ok(input)
    }

    fn forward_trace(&self, input: Vec<f64>) -> Trace {
        let mut hidden = self.layer1.forward(&input);
        tanh_in_place(&mut hidden);
        let mut feature = self.layer2.forward(&hidden);
        tanh_in_place(&mut feature);
        let logits = self.lm_head.forward(&feature);
        Trace {
            input,
            hidden,
            feature,
            logits,
        }
    }

    /// Maps one (observation, instruction) view to its feature vector.
    pub fn encode(&self, observation: &Observation, instruction: &Instruction) -> Result<Feature> {
        let input = self.encoder_input(observation, instruction)?;
        let mut hidden = self.layer1.forward(&input);
        tanh_in_place(&mut hidden);
        let mut feature = self.layer2.forward(&hidden);
        tanh_in_place(&mut feature);
        Feature::new(feature)
    }

    /// Frozen LM head: feature to `D × K` logits.
    pub fn lm_logits(&self, feature: &Feature) -> Result<LogitsMatrix> {
        if feature.len() != self.arch.feature {
            return Err(PdfError::shape(format!("feature of length {}", self.arch.feature), feature.len()));
        }
        LogitsMatrix::new(self.arch.dims, self.arch.tokens, self.lm_head.forward(feature.values()))
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let a = &self.arch;
        let mut out = vec![
            a.to_tensor(),
            Tensor {
                name: "encoder.embedding".into(),
                dims: vec![a.vocab as u32, a.embed as u32],
                data: self.embedding.clone(),
            },
        ];
        out.extend(self.layer1.to_tensors("encoder.layer1"));
        out.extend(self.layer2.to_tensors("encoder.layer2"));
        out.extend(self.lm_head.to_tensors("lm_head"));
        out
    }

    /// Rebuilds a snapshot, optionally checking it against an expected architecture.
    pub fn from_tensors(tensors: &[Tensor], expected: Option<&Arch>) -> Result<Self> {
        let arch = Arch::from_tensors(tensors)?;
        if let Some(e) = expected {
            if *e != arch {
                return Err(PdfError::DimensionMismatch(format!(
                    "file architecture {arch:?} differs from expected {e:?}"
                )));
            }
        }
        let embedding = take_tensor(tensors, "encoder.embedding", &[arch.vocab as u32, arch.embed as u32])?;
        Ok(Self {
            arch,
            embedding,
            layer1: Dense::from_tensors(tensors, "encoder.layer1", arch.encoder_inputs(), arch.hidden)?,
            layer2: Dense::from_tensors(tensors, "encoder.layer2", arch.hidden, arch.feature)?,
            lm_head: Dense::from_tensors(tensors, "lm_head", arch.feature, arch.dims * arch.tokens)?,
        })
    }

    /// SHA-256 over the canonical weight encoding.
    pub fn checksum(&self) -> String {
        crate::weights::checksum(&self.to_tensors())
    }
}

/// Per-dimension argmax; ties go to the lowest token index.
pub fn greedy_action(logits: &LogitsMatrix) -> Action {
    let tokens = logits
        .rows()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Action::from_trusted(tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoStep {
    pub observation: Observation,
    pub instruction: Instruction,
    pub action: Action,
}

/// An expert trajectory. Nonempty, and every step shares one instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    steps: Vec<DemoStep>,
}

impl Demonstration {
    pub fn new(steps: Vec<DemoStep>) -> Result<Self> {
        let first = steps.first().ok_or(PdfError::EmptyInput("demonstration"))?;
        if steps.iter().any(|s| s.instruction != first.instruction) {
            return Err(PdfError::InvalidValue(
                "all steps of a demonstration must share one instruction".into(),
            ));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[DemoStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcOptions {
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    /// Adam step size.
    pub learning_rate: f64,
}

impl Default for BcOptions {
    fn default() -> Self {
        Self {
            epochs: 300,
            seed: 0,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut f32>, grads: impl Iterator<Item = f64>, t: i32, lr: f64) {
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let update = lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            *p = (f64::from(*p) - update) as f32;
        }
    }
}

struct BcGrads {
    embedding: Vec<f64>,
    layer1: DenseGrad,
    layer2: DenseGrad,
    lm_head: DenseGrad,
}

/// Trains encoder and LM head with per-dimension cross-entropy summed over
/// action dimensions. Deterministic given `opts.seed`.
pub fn train_bc(demos: &[Demonstration], arch: Arch, opts: &BcOptions) -> Result<PolicySnapshot> {
    if demos.is_empty() {
        return Err(PdfError::EmptyInput("demonstrations"));
    }
    if opts.batch_size == 0 {
        return Err(PdfError::InvalidConfig("bc batch_size must be >= 1".into()));
    }
    let mut policy = PolicySnapshot::init(arch, opts.seed)?;

    let mut samples = Vec::new();
    for step in demos.iter().flat_map(|d| d.steps()) {
        if step.action.dims() != arch.dims || step.action.tokens().iter().any(|t| *t >= arch.tokens) {
            return Err(PdfError::shape(
                format!("action with {} dims in [0, {})", arch.dims, arch.tokens),
                step.action.to_string(),
            ));
        }
        policy.encoder_input(&step.observation, &step.instruction)?;
        samples.push(step);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x005e_edbc);
    let mut adam_emb = Adam::new(policy.embedding.len());
    let mut adam1 = Adam::new(policy.layer1.num_params());
    let mut adam2 = Adam::new(policy.layer2.num_params());
    let mut adam_head = Adam::new(policy.lm_head.num_params());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut t = 0;
    let (k, e) = (arch.tokens, arch.embed);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let mut grads = BcGrads {
                embedding: vec![0.0; policy.embedding.len()],
                layer1: DenseGrad::zeros_like(&policy.layer1),
                layer2: DenseGrad::zeros_like(&policy.layer2),
                lm_head: DenseGrad::zeros_like(&policy.lm_head),
            };
            for &i in batch {
                let step = samples[i];
                let (tokens, target) = (step.instruction.tokens(), step.action.tokens());
                // Embeddings move during training, so inputs are rebuilt every time.
                let trace = policy.forward_trace(policy.encoder_input(&step.observation, &step.instruction)?);
                let mut g_logits = vec![0.0; trace.logits.len()];
                for (d, &a) in target.iter().enumerate() {
                    let row = &trace.logits[d * k..(d + 1) * k];
                    epoch_loss -= log_softmax(row)[a];
                    for (j, p) in softmax(row).into_iter().enumerate() {
                        g_logits[d * k + j] = p - if j == a { 1.0 } else { 0.0 };
                    }
                }
                let g_feat = policy.lm_head.backward(&trace.feature, &g_logits, &mut grads.lm_head);
                let g_feat_pre = tanh_backward(&trace.feature, &g_feat);
                let g_hidden = policy.layer2.backward(&trace.hidden, &g_feat_pre, &mut grads.layer2);
                let g_hidden_pre = tanh_backward(&trace.hidden, &g_hidden);
                let g_input = policy.layer1.backward(&trace.input, &g_hidden_pre, &mut grads.layer1);
                let offset = arch.pixel_inputs();
                for (pos, &tok) in tokens.iter().enumerate() {
                    if tok == PAD_ID {
                        continue;
                    }
                    let tok = tok as usize;
                    for j in 0..e {
                        grads.embedding[tok * e + j] += g_input[offset + pos * e + j];
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            t += 1;
            let lr = opts.learning_rate;
            adam_emb.step(policy.embedding.iter_mut(), grads.embedding.iter().map(|g| g * scale), t, lr);
            adam1.step(policy.layer1.params_mut(), grads.layer1.iter().map(|g| g * scale), t, lr);
            adam2.step(policy.layer2.params_mut(), grads.layer2.iter().map(|g| g * scale), t, lr);
            adam_head.step(policy.lm_head.params_mut(), grads.lm_head.iter().map(|g| g * scale), t, lr);
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        if !mean_loss.is_finite() || policy.lm_head.params().any(|p| !p.is_finite()) {
            return Err(PdfError::Divergence { epoch, loss: mean_loss });
        }
    }
    ensure_finite(
        &policy.layer1.params().map(f64::from).collect::<Vec<_>>(),
        "encoder weights",
    )?;
    Ok(policy)
}

/// Fraction of demonstration steps on which the greedy action equals the expert's.
pub fn bc_accuracy(policy: &PolicySnapshot, demos: &[Demonstration]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for step in demos.iter().flat_map(|d| d.steps()) {
        let f = policy.encode(&step.observation, &step.instruction)?;
        if greedy_action(&policy.lm_logits(&f)?) == step.action {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(PdfError::EmptyInput("demonstrations"));
    }
    Ok(hits as f64 / total as f64)
}
