//! End-to-end optimization: Adam with linear warmup, the annealed loss
//! combination, checkpointing and per-step history.
//!
//! The loop is deterministic: dataset bytes plus the config (including the
//! seed) fully determine the trained parameters. All randomness flows from
//! one seed through two independent generator streams, one consumed by
//! parameter initialization and one by the batch sampler, so resuming
//! restores the exact sampling sequence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_batch, Batch, DataError, DatasetMode, PUDataset};
use crate::encoder::{param_shapes, DualEncoderModel, EncoderError, ModelConfig};
use crate::graph::{Graph, GraphError, NodeId};
use crate::losses::{
    bce_loss, ce_loss, class_risk_for, class_risk_uncorrected, pu_loss, AnnealSchedule,
    ClassPriors, LossError, RiskBreakdown,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient for {param:?} at step {step}; aborting")]
    NonFiniteGradient { param: String, step: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

type Result<T> = std::result::Result<T, TrainError>;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// All knobs of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Annealing exponent; at least 2.
    pub alpha: f64,
    /// Fraction of total steps spent ramping the learning rate up linearly.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Supervision mode; `None` takes the dataset's own mode.
    pub mode: Option<DatasetMode>,
    /// Ramp the unlabeled-risk term in over the schedule (on by default);
    /// disabling it applies the full weight from the first step.
    pub anneal: bool,
    /// Also anneal in single-class positive-only mode, which otherwise
    /// trains on the bare unlabeled-risk loss.
    pub anneal_pu_only: bool,
    /// Diagnostic: drop the non-negative correction (plain risk estimate).
    pub uncorrected_pu: bool,
    /// Include the unlabeled-risk term at all; off gives a supervised-only
    /// baseline with identical batching and schedules.
    pub use_pu: bool,
    /// Optional global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7.5e-5,
            batch_size: 128,
            epochs: 2,
            alpha: 3.0,
            warmup_fraction: 0.10,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            mode: None,
            anneal: true,
            anneal_pu_only: false,
            uncorrected_pu: false,
            use_pu: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epoch count must be positive".into()));
        }
        if self.alpha < 2.0 {
            return Err(TrainError::Config(format!(
                "annealing exponent must be >= 2, got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::Config(format!(
                "warmup fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(TrainError::Config(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(TrainError::Config("epsilon must be positive".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(TrainError::Config(format!(
                    "gradient clip must be positive, got {clip}"
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` (1-based): a linear ramp from zero over the first
/// `ceil(warmup_fraction * total)` steps, then the base rate.
pub fn lr_at(step: usize, total: usize, config: &TrainConfig) -> f64 {
    let warmup = (config.warmup_fraction * total as f64).ceil() as usize;
    if warmup > 0 && step <= warmup {
        config.learning_rate * step as f64 / warmup as f64
    } else {
        config.learning_rate
    }
}

/// First and second moment buffers, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Number of optimizer steps taken (bias-correction index).
    pub steps: usize,
}

impl AdamState {
    pub fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let m = params
            .iter()
            .map(|(k, t)| (k.clone(), t.zeros_like()))
            .collect();
        let v = params
            .iter()
            .map(|(k, t)| (k.clone(), t.zeros_like()))
            .collect();
        Self { m, v, steps: 0 }
    }
}

/// One bias-corrected Adam update, in 64-bit, over every parameter.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    state: &mut AdamState,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    config: &TrainConfig,
    step: usize,
) -> Result<()> {
    for (name, grad) in grads {
        if !grad.all_finite() {
            return Err(TrainError::NonFiniteGradient {
                param: name.clone(),
                step,
            });
        }
    }
    state.steps += 1;
    let t = state.steps as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    for (name, param) in params.iter_mut() {
        let grad = grads
            .get(name)
            .ok_or_else(|| TrainError::Config(format!("missing gradient for {name:?}")))?;
        let m = state.m.get_mut(name).expect("moment buffers mirror params");
        let v = state.v.get_mut(name).expect("moment buffers mirror params");
        for i in 0..param.numel() {
            let g = grad.data()[i];
            let mi = config.beta1 * m.data()[i] + (1.0 - config.beta1) * g;
            let vi = config.beta2 * v.data()[i] + (1.0 - config.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: DualEncoderModel,
    pub adam: AdamState,
    /// Steps completed so far; annealing queries use `step + 1` next.
    pub step: usize,
    pub total_steps: usize,
    pub sampler_rng: ChaCha20Rng,
    pub config: TrainConfig,
    pub priors: ClassPriors,
    pub label_names: Vec<String>,
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub ce_loss: f64,
    pub pu_loss: f64,
    /// Weight actually applied to the unlabeled-risk term this step.
    pub anneal_weight: f64,
    pub lr: f64,
    /// How many classes hit the negative-risk correction this step.
    pub corrections: usize,
}

pub struct TrainRun {
    pub state: TrainState,
    pub history: Vec<StepRecord>,
}

impl TrainRun {
    pub fn model(&self) -> &DualEncoderModel {
        &self.state.model
    }
}

/// The loss graph of one batch, with handles to its pieces.
pub struct StepLoss {
    pub graph: Graph,
    pub total: NodeId,
    pub ce: Option<NodeId>,
    pub pu: Option<NodeId>,
    pub breakdowns: Vec<RiskBreakdown>,
    pub weight: f64,
}

fn resolved_mode(config: &TrainConfig, dataset: &PUDataset) -> DatasetMode {
    config.mode.unwrap_or_else(|| dataset.mode())
}

fn validate_setup(
    dataset: &PUDataset,
    priors: &ClassPriors,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<DatasetMode> {
    config.validate()?;
    model_config.validate()?;
    let c = dataset.class_count();
    if model_config.classes != c {
        return Err(TrainError::Config(format!(
            "model emits {} classes but the dataset defines {c}",
            model_config.classes
        )));
    }
    if priors.len() != c {
        return Err(TrainError::Config(format!(
            "{} priors for {c} classes",
            priors.len()
        )));
    }
    let mode = resolved_mode(config, dataset);
    match mode {
        DatasetMode::PuOnly => {
            if c != 1 {
                return Err(TrainError::Config(format!(
                    "positive-only mode needs a single class, got {c}"
                )));
            }
            if !config.use_pu {
                return Err(TrainError::Config(
                    "positive-only mode with the unlabeled-risk term disabled trains nothing"
                        .into(),
                ));
            }
        }
        DatasetMode::MonoLabel | DatasetMode::MultiLabel => {
            if dataset.n_labeled() == 0 {
                return Err(TrainError::Config(
                    "supervised mode needs at least one labeled pair".into(),
                ));
            }
        }
    }
    if config.use_pu {
        if dataset.n_unlabeled() == 0 {
            return Err(TrainError::Config(
                "the unlabeled-risk term needs unlabeled pairs; disable it for fully \
                 labeled data"
                    .into(),
            ));
        }
        for class in 0..c {
            if dataset.n_labeled_class(class) == 0 {
                return Err(TrainError::Config(format!(
                    "class {class} ({:?}) has no labeled pairs, so its risk estimate is \
                     undefined",
                    dataset.label_names()[class]
                )));
            }
        }
    }
    Ok(mode)
}

/// Build the full loss graph for one batch at step `t`.
///
/// Both sentence batches share one registered parameter set; labeled pairs
/// are laid out class by class, then the unlabeled block. The returned graph
/// is ready for `backward(total)`.
pub fn build_step_loss(
    model: &DualEncoderModel,
    batch: &Batch,
    priors: &ClassPriors,
    config: &TrainConfig,
    mode: DatasetMode,
    t: usize,
    total_steps: usize,
) -> Result<StepLoss> {
    let tokenizer = model.tokenizer();
    let c = model.classes();
    let schedule = AnnealSchedule::new(total_steps, config.alpha)?;

    let mut premises: Vec<Vec<usize>> = Vec::new();
    let mut hypotheses: Vec<Vec<usize>> = Vec::new();
    let mut class_ranges = Vec::with_capacity(c);
    for pairs in &batch.per_class {
        let start = premises.len();
        for p in pairs {
            premises.push(tokenizer.tokenize(&p.premise));
            hypotheses.push(tokenizer.tokenize(&p.hypothesis));
        }
        class_ranges.push((start, pairs.len()));
    }
    let labeled_rows = premises.len();
    for p in &batch.unlabeled {
        premises.push(tokenizer.tokenize(&p.premise));
        hypotheses.push(tokenizer.tokenize(&p.hypothesis));
    }
    let unlabeled_rows = premises.len() - labeled_rows;

    let mut g = Graph::new();
    let nodes = model.register(&mut g)?;
    let scores = model.pair_scores(&mut g, &nodes, premises, hypotheses)?;

    // Supervised term over the labeled block.
    let ce = if mode == DatasetMode::PuOnly || labeled_rows == 0 {
        None
    } else {
        let mut labels = Tensor::zeros(vec![labeled_rows, c]);
        for (class, &(start, len)) in class_ranges.iter().enumerate() {
            for row in start..start + len {
                labels.data_mut()[row * c + class] = 1.0;
            }
        }
        let labeled_scores = g.row_slice(scores, 0, labeled_rows)?;
        let node = match mode {
            DatasetMode::MultiLabel => bce_loss(&mut g, labeled_scores, &labels)?,
            _ => ce_loss(&mut g, labeled_scores, &labels)?,
        };
        Some(node)
    };

    // Per-class risk over labeled positives and the unlabeled block.
    let (pu, breakdowns) = if config.use_pu && unlabeled_rows > 0 {
        let unl_scores = g.row_slice(scores, labeled_rows, unlabeled_rows)?;
        let mut risks = Vec::with_capacity(c);
        let mut breakdowns = Vec::with_capacity(c);
        for (class, &(start, len)) in class_ranges.iter().enumerate() {
            let pos_scores = g.row_slice(scores, start, len)?;
            let pos_col = g.column(pos_scores, class)?;
            let unl_col = g.column(unl_scores, class)?;
            let risk = if config.uncorrected_pu {
                class_risk_uncorrected(&mut g, pos_col, unl_col, priors.pi_p(class), class)?
            } else {
                class_risk_for(&mut g, pos_col, unl_col, priors.pi_p(class), class)?
            };
            risks.push(risk.risk);
            breakdowns.push(risk.breakdown);
        }
        (Some(pu_loss(&mut g, &risks)?), breakdowns)
    } else {
        (None, Vec::new())
    };

    let (total, weight) = match (ce, pu) {
        (Some(ce_node), Some(pu_node)) => {
            let w = if config.anneal {
                schedule.weight(t)?
            } else {
                1.0
            };
            let weighted = g.scale(pu_node, w)?;
            (g.add(ce_node, weighted)?, w)
        }
        (Some(ce_node), None) => (ce_node, 0.0),
        (None, Some(pu_node)) => {
            if config.anneal && config.anneal_pu_only {
                let w = schedule.weight(t)?;
                (g.scale(pu_node, w)?, w)
            } else {
                (pu_node, 1.0)
            }
        }
        (None, None) => {
            return Err(TrainError::Config(
                "no loss terms for this batch; check mode and labeled counts".into(),
            ))
        }
    };

    Ok(StepLoss {
        graph: g,
        total,
        ce,
        pu,
        breakdowns,
        weight,
    })
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Fresh training state: seeded model parameters, zero moments, step 0.
pub fn init(
    dataset: &PUDataset,
    priors: ClassPriors,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainState> {
    let mode = validate_setup(dataset, &priors, model_config, config)?;
    let steps_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let mut init_rng = ChaCha20Rng::seed_from_u64(config.seed);
    init_rng.set_stream(0);
    let model = DualEncoderModel::new(model_config.clone(), &mut init_rng)?;

    let mut sampler_rng = ChaCha20Rng::seed_from_u64(config.seed);
    sampler_rng.set_stream(1);

    let adam = AdamState::new(model.params());
    let mut config = config.clone();
    config.mode = Some(mode);
    Ok(TrainState {
        model,
        adam,
        step: 0,
        total_steps,
        sampler_rng,
        config,
        priors,
        label_names: dataset.label_names().to_vec(),
    })
}

/// Advance the state by up to `max_steps` (or to completion), returning the
/// per-step records.
pub fn run(
    state: &mut TrainState,
    dataset: &PUDataset,
    max_steps: Option<usize>,
) -> Result<Vec<StepRecord>> {
    let mode = resolved_mode(&state.config, dataset);
    let end = match max_steps {
        Some(n) => state.total_steps.min(state.step + n),
        None => state.total_steps,
    };
    let mut history = Vec::with_capacity(end.saturating_sub(state.step));
    let config = state.config.clone();
    while state.step < end {
        let t = state.step + 1;
        let batch = sample_batch(dataset, config.batch_size, &mut state.sampler_rng, t)?;
        let mut step_loss = build_step_loss(
            &state.model,
            &batch,
            &state.priors,
            &config,
            mode,
            t,
            state.total_steps,
        )?;
        step_loss.graph.backward(step_loss.total)?;
        let mut grads = step_loss.graph.param_grads();
        if let Some(clip) = config.grad_clip {
            let norm = global_norm(&grads);
            if norm > clip {
                let scale = clip / norm;
                for g in grads.values_mut() {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                }
            }
        }
        let lr = lr_at(t, state.total_steps, &config);
        adam_step(
            state.model.params_mut(),
            &mut state.adam,
            &grads,
            lr,
            &config,
            t,
        )?;

        let ce_loss = match step_loss.ce {
            Some(id) => step_loss.graph.scalar_value(id)?,
            None => 0.0,
        };
        let pu_loss = match step_loss.pu {
            Some(id) => step_loss.graph.scalar_value(id)?,
            None => 0.0,
        };
        history.push(StepRecord {
            step: t,
            ce_loss,
            pu_loss,
            anneal_weight: if step_loss.pu.is_some() {
                step_loss.weight
            } else {
                0.0
            },
            lr,
            corrections: step_loss
                .breakdowns
                .iter()
                .filter(|b| b.correction_applied)
                .count(),
        });
        state.step = t;
    }
    Ok(history)
}

/// Train from scratch to completion.
pub fn train(
    dataset: &PUDataset,
    priors: ClassPriors,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainRun> {
    let mut state = init(dataset, priors, model_config, config)?;
    let history = run(&mut state, dataset, None)?;
    Ok(TrainRun { state, history })
}

/// Continue a loaded state to completion.
pub fn resume(mut state: TrainState, dataset: &PUDataset) -> Result<TrainRun> {
    let history = run(&mut state, dataset, None)?;
    Ok(TrainRun { state, history })
}

// ── history CSV ─────────────────────────────────────────────────────

pub const HISTORY_HEADER: &str = "step,ce_loss,pu_loss,anneal_weight,lr,corrections";

pub fn history_csv(history: &[StepRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.ce_loss, r.pu_loss, r.anneal_weight, r.lr, r.corrections
        ));
    }
    out
}

pub fn write_history(path: &Path, history: &[StepRecord]) -> Result<()> {
    fs::write(path, history_csv(history))?;
    Ok(())
}

// ── checkpointing ───────────────────────────────────────────────────

fn mode_str(mode: DatasetMode) -> &'static str {
    match mode {
        DatasetMode::MonoLabel => "mono-label",
        DatasetMode::MultiLabel => "multi-label",
        DatasetMode::PuOnly => "pu-only",
    }
}

fn mode_from_str(s: &str) -> Result<DatasetMode> {
    match s {
        "mono-label" => Ok(DatasetMode::MonoLabel),
        "multi-label" => Ok(DatasetMode::MultiLabel),
        "pu-only" => Ok(DatasetMode::PuOnly),
        other => Err(TrainError::Checkpoint(format!("unknown mode {other:?}"))),
    }
}

fn write_f32_file(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_file(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    if bytes.len() != expected * 4 {
        return Err(TrainError::Checkpoint(format!(
            "{}: expected {} bytes ({expected} floats), found {}",
            path.display(),
            expected * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Write parameters (32-bit little-endian), optimizer moments, and a
/// key-value manifest. The manifest lands last, so an interrupted save never
/// looks like a complete checkpoint.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, tensor) in state.model.params() {
        write_f32_file(&dir.join(format!("{name}.f32")), tensor.data())?;
        write_f32_file(
            &dir.join(format!("{name}.adam_m.f32")),
            state.adam.m[name].data(),
        )?;
        write_f32_file(
            &dir.join(format!("{name}.adam_v.f32")),
            state.adam.v[name].data(),
        )?;
    }

    let mc = state.model.config();
    let tc = &state.config;
    let mut man = String::new();
    let mut kv = |k: &str, v: String| {
        man.push_str(k);
        man.push_str(" = ");
        man.push_str(&v);
        man.push('\n');
    };
    kv("format_version", CHECKPOINT_VERSION.to_string());
    kv("step", state.step.to_string());
    kv("total_steps", state.total_steps.to_string());
    kv("adam_steps", state.adam.steps.to_string());
    kv("rng_seed", hex_encode(&state.sampler_rng.get_seed()));
    kv("rng_stream", state.sampler_rng.get_stream().to_string());
    kv("rng_word_pos", state.sampler_rng.get_word_pos().to_string());
    kv("model.buckets", mc.buckets.to_string());
    kv("model.d_emb", mc.d_emb.to_string());
    kv("model.d_enc", mc.d_enc.to_string());
    kv("model.classes", mc.classes.to_string());
    kv("model.lowercase", mc.lowercase.to_string());
    kv("train.learning_rate", tc.learning_rate.to_string());
    kv("train.batch_size", tc.batch_size.to_string());
    kv("train.epochs", tc.epochs.to_string());
    kv("train.alpha", tc.alpha.to_string());
    kv("train.warmup_fraction", tc.warmup_fraction.to_string());
    kv("train.seed", tc.seed.to_string());
    kv("train.beta1", tc.beta1.to_string());
    kv("train.beta2", tc.beta2.to_string());
    kv("train.epsilon", tc.epsilon.to_string());
    kv(
        "train.mode",
        mode_str(tc.mode.unwrap_or(DatasetMode::MonoLabel)).to_string(),
    );
    kv("train.anneal", tc.anneal.to_string());
    kv("train.anneal_pu_only", tc.anneal_pu_only.to_string());
    kv("train.uncorrected_pu", tc.uncorrected_pu.to_string());
    kv("train.use_pu", tc.use_pu.to_string());
    kv(
        "train.grad_clip",
        tc.grad_clip.map_or("none".into(), |c| c.to_string()),
    );
    kv(
        "priors",
        state
            .priors
            .values()
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    kv("label_names", state.label_names.join(","));
    for (name, shape) in param_shapes(mc) {
        kv(
            &format!("param.{name}"),
            shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x"),
        );
    }

    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(man.as_bytes())?;
    f.flush()?;
    Ok(())
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(TrainError::Checkpoint("odd-length hex string".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|e| TrainError::Checkpoint(format!("bad hex: {e}")))
        })
        .collect()
}

struct Manifest(BTreeMap<String, String>);

impl Manifest {
    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                TrainError::Checkpoint(format!("manifest line {} is not `key = value`", idx + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| TrainError::Checkpoint(format!("manifest is missing {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.parse().map_err(|e| {
            TrainError::Checkpoint(format!("manifest key {key:?}: {e}"))
        })
    }
}

/// Restore a full training state. Any inconsistency — version, shapes,
/// truncated arrays, malformed manifest — fails the load as a whole.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let man = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let version: u32 = man.parse("format_version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }

    let model_config = ModelConfig {
        buckets: man.parse("model.buckets")?,
        d_emb: man.parse("model.d_emb")?,
        d_enc: man.parse("model.d_enc")?,
        classes: man.parse("model.classes")?,
        lowercase: man.parse("model.lowercase")?,
    };

    let grad_clip = match man.get("train.grad_clip")? {
        "none" => None,
        v => Some(v.parse().map_err(|e| {
            TrainError::Checkpoint(format!("manifest key \"train.grad_clip\": {e}"))
        })?),
    };
    let config = TrainConfig {
        learning_rate: man.parse("train.learning_rate")?,
        batch_size: man.parse("train.batch_size")?,
        epochs: man.parse("train.epochs")?,
        alpha: man.parse("train.alpha")?,
        warmup_fraction: man.parse("train.warmup_fraction")?,
        seed: man.parse("train.seed")?,
        beta1: man.parse("train.beta1")?,
        beta2: man.parse("train.beta2")?,
        epsilon: man.parse("train.epsilon")?,
        mode: Some(mode_from_str(man.get("train.mode")?)?),
        anneal: man.parse("train.anneal")?,
        anneal_pu_only: man.parse("train.anneal_pu_only")?,
        uncorrected_pu: man.parse("train.uncorrected_pu")?,
        use_pu: man.parse("train.use_pu")?,
        grad_clip,
    };

    let priors_vec: Vec<f64> = man
        .get("priors")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| TrainError::Checkpoint(format!("priors: {e}")))
        })
        .collect::<Result<_>>()?;
    let priors = ClassPriors::new(priors_vec)
        .map_err(|e| TrainError::Checkpoint(format!("priors: {e}")))?;
    let label_names: Vec<String> = man
        .get("label_names")?
        .split(',')
        .map(str::to_string)
        .collect();

    let mut params = BTreeMap::new();
    let mut adam_m = BTreeMap::new();
    let mut adam_v = BTreeMap::new();
    for (name, shape) in param_shapes(&model_config) {
        let declared = man.get(&format!("param.{name}"))?;
        let shape_str: String = shape
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        if declared != shape_str {
            return Err(TrainError::Checkpoint(format!(
                "parameter {name:?}: manifest declares {declared}, model config implies \
                 {shape_str}"
            )));
        }
        let numel: usize = shape.iter().product();
        let load = |suffix: &str| -> Result<Tensor> {
            let data = read_f32_file(&dir.join(format!("{name}{suffix}.f32")), numel)?;
            Tensor::new(shape.clone(), data)
                .map_err(|e| TrainError::Checkpoint(format!("parameter {name:?}: {e}")))
        };
        params.insert(name.clone(), load("")?);
        adam_m.insert(name.clone(), load(".adam_m")?);
        adam_v.insert(name.clone(), load(".adam_v")?);
    }
    let model = DualEncoderModel::from_params(model_config, params)?;
    let adam = AdamState {
        m: adam_m,
        v: adam_v,
        steps: man.parse("adam_steps")?,
    };

    let seed_bytes = hex_decode(man.get("rng_seed")?)?;
    let seed: [u8; 32] = seed_bytes
        .try_into()
        .map_err(|_| TrainError::Checkpoint("rng seed must be 32 bytes".into()))?;
    let mut sampler_rng = ChaCha20Rng::from_seed(seed);
    sampler_rng.set_stream(man.parse("rng_stream")?);
    sampler_rng.set_word_pos(man.parse("rng_word_pos")?);

    Ok(TrainState {
        model,
        adam,
        step: man.parse("step")?,
        total_steps: man.parse("total_steps")?,
        sampler_rng,
        config,
        priors,
        label_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthKind, SynthSpec};

    fn tiny_model_config(classes: usize) -> ModelConfig {
        ModelConfig {
            buckets: 64,
            d_emb: 8,
            d_enc: 8,
            classes,
            lowercase: true,
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 1,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(pairs: usize, fraction: f64, seed: u64) -> (PUDataset, ClassPriors) {
        let spec = SynthSpec {
            clusters: 4,
            vocab: 40,
            sent_len: 4,
            pairs,
            label_fraction: fraction,
            seed,
        };
        let (ds, _) = synth_generate(&spec, SynthKind::Binary).unwrap();
        let priors = ClassPriors::new(vec![0.5, 0.5]).unwrap();
        (ds, priors)
    }

    #[test]
    fn lr_warmup_ramps_then_plateaus() {
        let config = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.10,
            ..TrainConfig::default()
        };
        // Warmup covers the first 10 of 100 steps.
        assert_eq!(lr_at(5, 100, &config), 0.5);
        assert_eq!(lr_at(10, 100, &config), 1.0);
        assert_eq!(lr_at(11, 100, &config), 1.0);
        assert_eq!(lr_at(100, 100, &config), 1.0);

        let none = TrainConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(1, 100, &none), 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            Tensor::vector(&[1.0, -2.0, 0.25, 10.0]),
        );
        let mut state = AdamState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(&[0.5, -0.5, 0.5, 0.5]));
        let config = TrainConfig::default();
        let lr = 1e-2;
        let before = params["w"].clone();
        adam_step(&mut params, &mut state, &grads, lr, &config, 1).unwrap();
        for i in 0..4 {
            let delta = params["w"].data()[i] - before.data()[i];
            let expected = -lr * grads["w"].data()[i].signum();
            // Bias-corrected m-hat/sqrt(v-hat) is exactly sign(g) up to eps.
            assert!(
                (delta - expected).abs() < 1e-6,
                "i={i}: delta {delta} vs {expected}"
            );
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::vector(&[3.0, -1.0]));
        let mut state = AdamState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(&[0.0, 0.0]));
        let before = params["w"].clone();
        adam_step(&mut params, &mut state, &grads, 0.1, &TrainConfig::default(), 1).unwrap();
        assert_eq!(params["w"], before);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::vector(&[3.0]));
        let mut state = AdamState::new(&params);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::vector(&[f64::NAN]));
        assert!(matches!(
            adam_step(&mut params, &mut state, &grads, 0.1, &TrainConfig::default(), 5),
            Err(TrainError::NonFiniteGradient { step: 5, .. })
        ));
    }

    #[test]
    fn history_covers_every_step_with_the_cubic_ramp() {
        let (ds, priors) = tiny_dataset(80, 0.5, 3);
        let config = tiny_train_config(); // batch 8, 1 epoch -> 10 steps
        let run = train(&ds, priors, &tiny_model_config(2), &config).unwrap();
        assert_eq!(run.history.len(), 10);
        for (i, rec) in run.history.iter().enumerate() {
            let t = i + 1;
            assert_eq!(rec.step, t);
            let expected = (t as f64 / 10.0).powi(3);
            assert!((rec.anneal_weight - expected).abs() < 1e-15);
        }
        assert_eq!(run.state.step, 10);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (ds, priors) = tiny_dataset(64, 0.5, 9);
        let config = tiny_train_config();
        let a = train(&ds, priors.clone(), &tiny_model_config(2), &config).unwrap();
        let b = train(&ds, priors, &tiny_model_config(2), &config).unwrap();
        assert_eq!(a.state.model.params(), b.state.model.params());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn pu_only_mode_has_no_supervised_term() {
        let spec = SynthSpec {
            clusters: 4,
            vocab: 40,
            sent_len: 4,
            pairs: 64,
            label_fraction: 0.25,
            seed: 5,
        };
        let (ds, _) = synth_generate(&spec, SynthKind::PositiveOnly).unwrap();
        assert_eq!(ds.class_count(), 1);
        let priors = ClassPriors::new(vec![0.5]).unwrap();
        let run = train(&ds, priors, &tiny_model_config(1), &tiny_train_config()).unwrap();
        for rec in &run.history {
            assert_eq!(rec.ce_loss, 0.0);
            assert_eq!(rec.anneal_weight, 1.0); // fallback is un-annealed
            assert!(rec.pu_loss >= 0.0);
        }
    }

    #[test]
    fn zero_init_head_never_triggers_the_correction() {
        // At zero scores every risk term is 0.5, so the negative risk is
        // 0.5 (1 - prior) >= 0 for any legal prior.
        let (ds, priors) = tiny_dataset(64, 0.5, 11);
        let config = tiny_train_config();
        let mut state = init(&ds, priors.clone(), &tiny_model_config(2), &config).unwrap();
        let c = state.model.classes();
        state
            .model
            .set_param("head_w2", Tensor::zeros(vec![crate::encoder::HEAD_WIDTH, c]))
            .unwrap();
        let mut rng = state.sampler_rng.clone();
        let batch = sample_batch(&ds, config.batch_size, &mut rng, 1).unwrap();
        let step = build_step_loss(
            &state.model,
            &batch,
            &priors,
            &state.config,
            DatasetMode::MonoLabel,
            1,
            state.total_steps,
        )
        .unwrap();
        assert!(step.breakdowns.iter().all(|b| !b.correction_applied));
        for b in &step.breakdowns {
            assert!((b.negative_risk - 0.5 * (1.0 - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_decomposes_into_ce_plus_weighted_pu() {
        let (ds, priors) = tiny_dataset(64, 0.5, 13);
        let config = tiny_train_config();
        let state = init(&ds, priors.clone(), &tiny_model_config(2), &config).unwrap();
        let t = 3;
        let mut rng = state.sampler_rng.clone();
        let batch = sample_batch(&ds, config.batch_size, &mut rng, t).unwrap();

        let grads_of = |target: &str| -> BTreeMap<String, Tensor> {
            let mut cfg = config.clone();
            match target {
                "ce" => cfg.use_pu = false,
                "pu" => cfg.mode = Some(DatasetMode::PuOnly),
                _ => {}
            }
            // PU-only grads come from the raw risk term: rebuild by hand.
            let mut step = if target == "pu" {
                let mut s = build_step_loss(
                    &state.model,
                    &batch,
                    &priors,
                    &config,
                    DatasetMode::MonoLabel,
                    t,
                    state.total_steps,
                )
                .unwrap();
                s.total = s.pu.unwrap();
                s
            } else {
                build_step_loss(
                    &state.model,
                    &batch,
                    &priors,
                    &cfg,
                    DatasetMode::MonoLabel,
                    t,
                    state.total_steps,
                )
                .unwrap()
            };
            step.graph.backward(step.total).unwrap();
            step.graph.param_grads()
        };

        let total = grads_of("total");
        let ce = grads_of("ce");
        let pu = grads_of("pu");
        let w = (t as f64 / state.total_steps as f64).powi(3);
        for name in total.keys() {
            let t_g = &total[name];
            let c_g = &ce[name];
            let p_g = &pu[name];
            for i in 0..t_g.numel() {
                let combined = c_g.data()[i] + w * p_g.data()[i];
                assert!(
                    (t_g.data()[i] - combined).abs() < 1e-10,
                    "{name}[{i}]: {} vs {combined}",
                    t_g.data()[i]
                );
            }
        }
    }

    #[test]
    fn mean_positive_score_rises_when_unlabeled_pool_is_positive() {
        // Single-class data whose unlabeled pool contains only true
        // positives; with a prior near one the risk term pushes scores up.
        let spec = SynthSpec {
            clusters: 4,
            vocab: 40,
            sent_len: 4,
            pairs: 400,
            label_fraction: 0.2,
            seed: 17,
        };
        let (_, pop) = synth_generate(&spec, SynthKind::PositiveOnly).unwrap();
        let positives: Vec<_> = pop
            .records
            .iter()
            .filter(|r| r.true_class == 0)
            .map(|r| r.pair.clone())
            .collect();
        let n = positives.len();
        let labeled = positives[..n / 5].to_vec();
        let unlabeled = positives[n / 5..].to_vec();
        let ds = PUDataset::new(
            vec![labeled.clone()],
            unlabeled,
            vec!["similar".into()],
            DatasetMode::PuOnly,
        )
        .unwrap();
        let priors = ClassPriors::new(vec![0.95]).unwrap();
        let config = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 16,
            epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let model_config = tiny_model_config(1);
        let state = init(&ds, priors.clone(), &model_config, &config).unwrap();
        let tokenizer = state.model.tokenizer();
        let pairs: Vec<(&str, &str)> = labeled
            .iter()
            .map(|p| (p.premise.as_str(), p.hypothesis.as_str()))
            .collect();
        let mean_score = |model: &DualEncoderModel| {
            let scores = model.score_pairs(&tokenizer, &pairs).unwrap();
            scores.data().iter().sum::<f64>() / pairs.len() as f64
        };
        let before = mean_score(&state.model);
        let run = train(&ds, priors, &model_config, &config).unwrap();
        let after = mean_score(run.model());
        assert!(
            after > before,
            "mean positive score {before} -> {after} did not increase"
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything_to_f32() {
        let (ds, priors) = tiny_dataset(64, 0.5, 21);
        let config = tiny_train_config();
        let run = train(&ds, priors, &tiny_model_config(2), &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&run.state, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();

        assert_eq!(loaded.step, run.state.step);
        assert_eq!(loaded.total_steps, run.state.total_steps);
        assert_eq!(loaded.adam.steps, run.state.adam.steps);
        assert_eq!(loaded.config, run.state.config);
        assert_eq!(loaded.priors, run.state.priors);
        assert_eq!(loaded.sampler_rng, run.state.sampler_rng);
        for (name, tensor) in run.state.model.params() {
            let restored = loaded.model.param(name);
            for (a, b) in tensor.data().iter().zip(restored.data()) {
                assert_eq!(*a as f32, *b as f32, "param {name}");
            }
        }
    }

    #[test]
    fn resume_continues_the_anneal_curve() {
        let (ds, priors) = tiny_dataset(80, 0.5, 23);
        let config = tiny_train_config(); // 10 total steps
        let mut state = init(&ds, priors, &tiny_model_config(2), &config).unwrap();
        let first = run(&mut state, &ds, Some(4)).unwrap();
        assert_eq!(first.len(), 4);
        assert_eq!(state.step, 4);

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&state, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        let rest = resume(loaded, &ds).unwrap();
        assert_eq!(rest.history.len(), 6);
        let next = &rest.history[0];
        assert_eq!(next.step, 5);
        assert!((next.anneal_weight - (5.0_f64 / 10.0).powi(3)).abs() < 1e-15);
        // The sampling sequence also continues: combined history equals an
        // uninterrupted run's history except for f32 parameter rounding.
        let full = train(&ds, rest.state.priors.clone(), &tiny_model_config(2), &config).unwrap();
        let weights_resumed: Vec<f64> = first
            .iter()
            .chain(&rest.history)
            .map(|r| r.anneal_weight)
            .collect();
        let weights_full: Vec<f64> = full.history.iter().map(|r| r.anneal_weight).collect();
        assert_eq!(weights_resumed, weights_full);
    }

    #[test]
    fn corrupt_manifest_fails_loudly() {
        let (ds, priors) = tiny_dataset(64, 0.5, 29);
        let run = train(&ds, priors, &tiny_model_config(2), &tiny_train_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&run.state, dir.path()).unwrap();

        fs::write(dir.path().join(MANIFEST_FILE), "format_version = 999\n").unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(TrainError::Checkpoint(_))
        ));

        fs::write(dir.path().join(MANIFEST_FILE), "not a manifest at all").unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()),
            Err(TrainError::Checkpoint(_))
        ));
    }

    #[test]
    fn truncated_parameter_file_fails_the_load() {
        let (ds, priors) = tiny_dataset(64, 0.5, 31);
        let run = train(&ds, priors, &tiny_model_config(2), &tiny_train_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&run.state, dir.path()).unwrap();
        let victim = dir.path().join("enc_w1.f32");
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        match load_checkpoint(dir.path()) {
            Err(TrainError::Checkpoint(msg)) => assert!(msg.contains("enc_w1")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_broken_setups() {
        let (ds, priors) = tiny_dataset(64, 0.5, 33);
        let bad_alpha = TrainConfig {
            alpha: 1.0,
            ..tiny_train_config()
        };
        assert!(train(&ds, priors.clone(), &tiny_model_config(2), &bad_alpha).is_err());

        let bad_classes = tiny_model_config(3);
        assert!(train(&ds, priors.clone(), &bad_classes, &tiny_train_config()).is_err());

        // Fully labeled data cannot support the unlabeled-risk term.
        let (full, full_priors) = tiny_dataset(64, 1.0, 35);
        assert!(matches!(
            train(&full, full_priors.clone(), &tiny_model_config(2), &tiny_train_config()),
            Err(TrainError::Config(_))
        ));
        let ce_only = TrainConfig {
            use_pu: false,
            ..tiny_train_config()
        };
        assert!(train(&full, full_priors, &tiny_model_config(2), &ce_only).is_ok());
        let _ = priors;
    }
}
