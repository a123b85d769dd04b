//! Training runs, checkpoint selection, and length-extrapolation evaluation.
//!
//! A [`RunConfig`] fixes everything about one run: the model, the training
//! length `L`, step/batch counts, optimizer settings, and which evaluation
//! modes to score at the end.  [`train_run`] executes it deterministically —
//! every random choice comes from a named stream of one seeded generator, so
//! two runs with the same seed produce identical [`RunRecord`]s (wall time
//! aside), and a pointer run and a baseline run with the same seed consume
//! *identical* training data, isolating the architecture variable.
//!
//! Two training regimens share the loop:
//!
//! * algorithmic tasks sample a fresh batch per step (length uniform over
//!   the valid range up to `L`, base addresses uniform over the whole
//!   space) and decode open-loop;
//! * bracket prediction pre-generates a dataset, batches it by length, and
//!   decodes causally with ground-truth label feedback, switching to
//!   self-feedback at evaluation.
//!
//! Validation runs on a frozen set at the first extrapolated length; the
//! checkpoint with the best validation token accuracy (earliest on ties) is
//! what final evaluations — and the persisted checkpoint file — use.
//! Evaluation always anchors the address bank at base 0: training saw every
//! base, so any base works, and a fixed one keeps records comparable.

use std::collections::BTreeMap;
use std::error::Error;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamConfig, EngineError, ParamSet};
use crate::model::{
    batch_input, batch_loss, bind_model, capture_rng, class_targets, decode_sequence,
    dyck_memory, encode_sequence, greedy_tokens, init_model_params, parameter_count,
    save_checkpoint, threshold_sets, Checkpoint, CheckpointError, Feedback, Flavor,
    ModelConfig, ModelError, ModelKind, RngState, StepTargets, EOS_CLASS,
};
use crate::pointer::MAX_ADDRESS_HEADS;
use crate::tasks::dyck::{gen_dyck, DyckInstance, DyckParams};
use crate::tasks::{gen_instance, Task, TaskError};
use crate::textio::{KvDoc, KvSection, TextError};
use crate::{Real, RealTape, Scalar};

/// Sequences scored per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

/// Maximum content heads the ablation grid sweeps.
pub const MAX_CONTENT_HEADS: usize = 2;

// ── errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum HarnessError {
    BadConfig { what: String },
    /// Checkpoint selection over an empty validation history.
    NoValidations,
    Model(ModelError),
    Engine(EngineError),
    Task(TaskError),
    Text(TextError),
    Checkpoint(CheckpointError),
    Io(std::io::Error),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::BadConfig { what } => write!(f, "bad run config: {what}"),
            HarnessError::NoValidations => write!(f, "no validation points recorded"),
            HarnessError::Model(e) => write!(f, "model: {e}"),
            HarnessError::Engine(e) => write!(f, "engine: {e}"),
            HarnessError::Task(e) => write!(f, "task: {e}"),
            HarnessError::Text(e) => write!(f, "record: {e}"),
            HarnessError::Checkpoint(e) => write!(f, "{e}"),
            HarnessError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl Error for HarnessError {}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Model(e)
    }
}

impl From<EngineError> for HarnessError {
    fn from(e: EngineError) -> Self {
        HarnessError::Engine(e)
    }
}

impl From<TaskError> for HarnessError {
    fn from(e: TaskError) -> Self {
        HarnessError::Task(e)
    }
}

impl From<TextError> for HarnessError {
    fn from(e: TextError) -> Self {
        HarnessError::Text(e)
    }
}

impl From<CheckpointError> for HarnessError {
    fn from(e: CheckpointError) -> Self {
        HarnessError::Checkpoint(e)
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e)
    }
}

// ── evaluation modes ────────────────────────────────────────────────────

/// Test-length schedule relative to the training length `L`.
///
/// Algorithmic tasks use the ladder `L, L+1, 2(L+1), 4(L+1), 8(L+1)`.
/// Bracket strings have even lengths, so their ladder is `2..=L` (the whole
/// training range), then `L+2, 2L, 4L, 8L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    AtTrain,
    NextLength,
    Double,
    Quadruple,
    Octuple,
}

impl EvalMode {
    pub const ALL: [EvalMode; 5] = [
        EvalMode::AtTrain,
        EvalMode::NextLength,
        EvalMode::Double,
        EvalMode::Quadruple,
        EvalMode::Octuple,
    ];

    pub fn label(&self, flavor: Flavor) -> &'static str {
        match flavor {
            Flavor::Algorithmic(_) => match self {
                EvalMode::AtTrain => "L",
                EvalMode::NextLength => "L+1",
                EvalMode::Double => "2(L+1)",
                EvalMode::Quadruple => "4(L+1)",
                EvalMode::Octuple => "8(L+1)",
            },
            Flavor::Dyck { .. } => match self {
                EvalMode::AtTrain => "L",
                EvalMode::NextLength => "L+2",
                EvalMode::Double => "2L",
                EvalMode::Quadruple => "4L",
                EvalMode::Octuple => "8L",
            },
        }
    }

    pub fn parse(s: &str) -> Option<EvalMode> {
        match s {
            "L" => Some(EvalMode::AtTrain),
            "L+1" | "L+2" => Some(EvalMode::NextLength),
            "2(L+1)" | "2L" => Some(EvalMode::Double),
            "4(L+1)" | "4L" => Some(EvalMode::Quadruple),
            "8(L+1)" | "8L" => Some(EvalMode::Octuple),
            _ => None,
        }
    }

    /// Inclusive length range this mode tests at, already snapped to the
    /// task's valid lengths.
    pub fn lengths(&self, flavor: Flavor, l: usize) -> (usize, usize) {
        match flavor {
            Flavor::Algorithmic(task) => {
                let len = match self {
                    EvalMode::AtTrain => l,
                    EvalMode::NextLength => l + 1,
                    EvalMode::Double => 2 * (l + 1),
                    EvalMode::Quadruple => 4 * (l + 1),
                    EvalMode::Octuple => 8 * (l + 1),
                };
                let len = task.snap_length(len);
                (len, len)
            }
            Flavor::Dyck { .. } => match self {
                EvalMode::AtTrain => (2, l),
                EvalMode::NextLength => (l + 2, l + 2),
                EvalMode::Double => (2 * l, 2 * l),
                EvalMode::Quadruple => (4 * l, 4 * l),
                EvalMode::Octuple => (8 * l, 8 * l),
            },
        }
    }
}

// ── run configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Longest training length `L`.
    pub train_len: usize,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    /// Global gradient-norm clip.
    pub clip: f64,
    pub seed: u64,
    /// Ground-truth feedback while training (bracket prediction only; the
    /// algorithmic protocol decodes from zeros).
    pub autoregressive: bool,
    /// Bracket-prediction training-set size; unused for algorithmic tasks.
    pub dataset: usize,
    pub eval_modes: Vec<EvalMode>,
    pub n_eval: usize,
    pub val_every: usize,
    pub val_size: usize,
    /// Modes beyond the validation mode whose accuracy is re-measured at
    /// every validation point (ablation plots read these curves).
    pub track_modes: Vec<EvalMode>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.model.validate()?;
        let bad = |what: String| Err(HarnessError::BadConfig { what });
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.val_every == 0 || self.val_size == 0 {
            return bad("validation cadence and size must be positive".into());
        }
        if self.n_eval == 0 {
            return bad("n_eval must be positive".into());
        }
        if self.clip <= 0.0 {
            return bad("gradient clip must be positive".into());
        }
        match self.model.flavor {
            Flavor::Algorithmic(task) => {
                if self.autoregressive {
                    return bad("algorithmic tasks decode open-loop, not autoregressively".into());
                }
                if self.train_len < task.min_length() {
                    return bad(format!(
                        "training length {} below {}'s minimum {}",
                        self.train_len,
                        task,
                        task.min_length()
                    ));
                }
                if task.snap_length(self.train_len) != self.train_len {
                    return bad(format!("training length {} invalid for {task}", self.train_len));
                }
            }
            Flavor::Dyck { .. } => {
                if !self.autoregressive {
                    return bad("bracket prediction trains autoregressively".into());
                }
                if self.train_len < 2 || self.train_len % 2 == 1 {
                    return bad(format!(
                        "bracket training length {} must be even and at least 2",
                        self.train_len
                    ));
                }
                if self.dataset == 0 {
                    return bad("bracket prediction needs a dataset size".into());
                }
            }
        }
        if self.model.kind == ModelKind::Panm && self.model.address_heads > 0 {
            let space = crate::address::address_space(self.model.bits);
            for mode in self.eval_modes.iter().chain(self.track_modes.iter()) {
                let (_, hi) = mode.lengths(self.model.flavor, self.train_len);
                if hi > space {
                    return bad(format!(
                        "mode {} needs {} slots but {} bits address only {}",
                        mode.label(self.model.flavor),
                        hi,
                        self.model.bits,
                        space
                    ));
                }
            }
        }
        Ok(())
    }

    /// Short name of what is being learned (`copy`, `dyck2`, ...).
    pub fn task_label(&self) -> String {
        match self.model.flavor {
            Flavor::Algorithmic(task) => task.name().to_string(),
            Flavor::Dyck { types } => format!("dyck{types}"),
        }
    }

    pub fn write_kv(&self, section: &mut KvSection) {
        self.model.write_kv(section);
        section.push("train_len", self.train_len);
        section.push("steps", self.steps);
        section.push("batch", self.batch);
        section.push("lr", self.adam.lr);
        section.push("beta1", self.adam.beta1);
        section.push("beta2", self.adam.beta2);
        section.push("eps", self.adam.eps);
        section.push("clip", self.clip);
        section.push("seed", self.seed);
        section.push("autoregressive", self.autoregressive);
        section.push("dataset", self.dataset);
        let modes = |list: &[EvalMode]| {
            list.iter()
                .map(|m| m.label(self.model.flavor))
                .collect::<Vec<_>>()
                .join(",")
        };
        section.push("eval_modes", modes(&self.eval_modes));
        section.push("n_eval", self.n_eval);
        section.push("val_every", self.val_every);
        section.push("val_size", self.val_size);
        let tracked = modes(&self.track_modes);
        section.push("track_modes", if tracked.is_empty() { "-".into() } else { tracked });
    }

    pub fn read_kv(section: &KvSection) -> Result<Self, HarnessError> {
        let model = ModelConfig::read_kv(section)?;
        let parse_modes = |key: &'static str| -> Result<Vec<EvalMode>, HarnessError> {
            let raw = section.require(key)?;
            if raw == "-" {
                return Ok(Vec::new());
            }
            raw.split(',')
                .map(|s| {
                    EvalMode::parse(s.trim()).ok_or_else(|| HarnessError::BadConfig {
                        what: format!("unknown evaluation mode '{s}'"),
                    })
                })
                .collect()
        };
        let cfg = RunConfig {
            model,
            train_len: section.field("train_len", "usize")?,
            steps: section.field("steps", "usize")?,
            batch: section.field("batch", "usize")?,
            adam: AdamConfig {
                lr: section.field("lr", "f64")?,
                beta1: section.field("beta1", "f64")?,
                beta2: section.field("beta2", "f64")?,
                eps: section.field("eps", "f64")?,
            },
            clip: section.field("clip", "f64")?,
            seed: section.field("seed", "u64")?,
            autoregressive: section.field("autoregressive", "bool")?,
            dataset: section.field("dataset", "usize")?,
            eval_modes: parse_modes("eval_modes")?,
            n_eval: section.field("n_eval", "usize")?,
            val_every: section.field("val_every", "usize")?,
            val_size: section.field("val_size", "usize")?,
            track_modes: parse_modes("track_modes")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Stable identifier: readable prefix plus a hash of the full config.
    pub fn run_id(&self) -> String {
        let mut doc = KvDoc::new();
        self.write_kv(doc.add_section("config"));
        let digest = Sha256::digest(doc.render().as_bytes());
        let short: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
        format!(
            "{}-{}-ha{}hc{}-L{}-s{}-{}",
            self.task_label(),
            self.model.kind.name(),
            self.model.address_heads,
            self.model.content_heads,
            self.train_len,
            self.seed,
            short
        )
    }
}

// ── random streams ──────────────────────────────────────────────────────

/// Stream ids carving one seed into independent generators.  Data streams
/// are architecture-blind: a pointer run and a baseline run with the same
/// seed read the same instances in the same order.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const VALIDATION: u64 = 3;
    pub const BASES: u64 = 4;
    /// Final evaluation uses `EVAL + mode index`.
    pub const EVAL: u64 = 16;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ── data sampling ───────────────────────────────────────────────────────

/// Uniform draw over the task's valid lengths in `[min, l_max]`.
fn sample_length(task: Task, l_max: usize, rng: &mut ChaCha8Rng) -> usize {
    if task.requires_even_length() {
        let lo = task.min_length().div_ceil(2);
        let hi = l_max / 2;
        2 * rng.gen_range(lo..=hi)
    } else {
        rng.gen_range(task.min_length()..=l_max)
    }
}

fn sample_bases(model: &ModelConfig, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let space = crate::address::address_space(model.bits);
    (0..batch).map(|_| rng.gen_range(0..space)).collect()
}

fn needs_bank(model: &ModelConfig) -> bool {
    model.kind == ModelKind::Panm && model.address_heads > 0
}

// ── scoring ─────────────────────────────────────────────────────────────

/// One sequence scored against its target-plus-EOS.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoredSeq {
    pub correct: usize,
    /// Target tokens plus the end symbol.
    pub total: usize,
    pub exact: bool,
    /// No EOS anywhere in the decode budget.
    pub truncated: bool,
}

/// Score a greedy rollout.  The model's output is everything before its
/// first EOS; positions after an early stop count as wrong, as does an
/// output that never stops.
pub fn score_outputs(target: &[usize], greedy: &[usize]) -> ScoredSeq {
    let total = target.len() + 1;
    let eos_at = greedy.iter().position(|&t| t == EOS_CLASS);
    let emitted = eos_at.map_or(greedy.len(), |e| e + 1);
    let mut correct = 0;
    for j in 0..total {
        let want = if j < target.len() { target[j] } else { EOS_CLASS };
        if j < emitted && greedy[j] == want {
            correct += 1;
        }
    }
    ScoredSeq {
        correct,
        total,
        exact: correct == total,
        truncated: eos_at.is_none(),
    }
}

/// Accuracy aggregate over one evaluation set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalScore {
    /// Percent of correct output positions (EOS included).
    pub token_acc: f64,
    /// Percent of exactly matched output sequences.
    pub seq_acc: f64,
    pub truncated: usize,
    pub n: usize,
    /// Output positions scored.
    pub positions: usize,
}

fn aggregate_scores(scores: &[ScoredSeq]) -> EvalScore {
    let positions: usize = scores.iter().map(|s| s.total).sum();
    let correct: usize = scores.iter().map(|s| s.correct).sum();
    let exact = scores.iter().filter(|s| s.exact).count();
    let truncated = scores.iter().filter(|s| s.truncated).count();
    EvalScore {
        token_acc: 100.0 * correct as f64 / positions.max(1) as f64,
        seq_acc: 100.0 * exact as f64 / scores.len().max(1) as f64,
        truncated,
        n: scores.len(),
        positions,
    }
}

/// Greedy rollouts for a batch of same-length instances, one token per
/// decode step per sequence.
fn algorithmic_rollouts<T: Scalar>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    instances: &[crate::tasks::TaskInstance],
    decode_steps: usize,
) -> Result<Vec<Vec<usize>>, HarnessError> {
    let input = batch_input::<T>(instances)?;
    let mut tape = crate::autodiff::Tape::<T>::new();
    let vars = bind_model(&mut tape, params, model)?;
    let enc = encode_sequence(&mut tape, &vars, model, &input)?;
    let bases = vec![0; input.batch];
    let out = decode_sequence(
        &mut tape,
        &vars,
        model,
        &enc,
        &bases,
        decode_steps,
        false,
        Feedback::Zeros,
    )?;
    let mut rollouts = vec![Vec::with_capacity(decode_steps); input.batch];
    for logits in &out.step_logits {
        for (i, tok) in greedy_tokens(&tape, *logits).into_iter().enumerate() {
            rollouts[i].push(tok);
        }
    }
    Ok(rollouts)
}

fn evaluate_algorithmic<T: Scalar>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    task: Task,
    len: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalScore, HarnessError> {
    let mut scores = Vec::with_capacity(n);
    let mut remaining = n;
    while remaining > 0 {
        let m = remaining.min(EVAL_CHUNK);
        remaining -= m;
        let instances: Vec<_> = (0..m)
            .map(|_| gen_instance(task, len, rng))
            .collect::<Result<_, _>>()?;
        let rollouts = algorithmic_rollouts(params, model, &instances, 2 * len + 2)?;
        for (inst, rollout) in instances.iter().zip(&rollouts) {
            scores.push(score_outputs(&inst.target, rollout));
        }
    }
    Ok(aggregate_scores(&scores))
}

/// Ground-truth decoder inputs for teacher-forced bracket training: step
/// `t` carries each sequence's label set from step `t-1` (zeros at `t=0`
/// and beyond a sequence's end).
fn dyck_teacher<T: Scalar>(
    labels: &[&[u16]],
    z_dim: usize,
    pad_to: usize,
) -> Vec<Array2<T>> {
    let n = labels.len();
    (0..pad_to)
        .map(|t| {
            Array2::from_shape_fn((z_dim, n), |(k, i)| {
                if t == 0 || t > labels[i].len() {
                    return T::zero();
                }
                if labels[i][t - 1] & (1 << k) != 0 {
                    T::one()
                } else {
                    T::zero()
                }
            })
        })
        .collect()
}

/// Per-step multi-hot targets plus per-sequence activity flags.
fn dyck_targets<T: Scalar>(
    labels: &[&[u16]],
    classes: usize,
    pad_to: usize,
) -> Vec<(Array2<T>, Vec<bool>)> {
    let n = labels.len();
    (0..pad_to)
        .map(|t| {
            let active: Vec<bool> = labels.iter().map(|l| t < l.len()).collect();
            let mat = Array2::from_shape_fn((classes, n), |(k, i)| {
                if t < labels[i].len() && labels[i][t] & (1 << k) != 0 {
                    T::one()
                } else {
                    T::zero()
                }
            });
            (mat, active)
        })
        .collect()
}

fn evaluate_dyck<T: Scalar>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    types: usize,
    lo: usize,
    hi: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalScore, HarnessError> {
    let grammar = DyckParams::standard(types);
    let mut positions = 0usize;
    let mut correct = 0usize;
    let mut exact = 0usize;
    let mut total = 0usize;
    let mut remaining = n;
    while remaining > 0 {
        let m = remaining.min(EVAL_CHUNK);
        remaining -= m;
        let instances: Vec<DyckInstance> = (0..m)
            .map(|_| gen_dyck(&grammar, lo, hi, rng))
            .collect::<Result<_, _>>()?;
        let pad_to = instances.iter().map(|d| d.tokens.len()).max().unwrap_or(0);
        let tokens: Vec<Vec<usize>> = instances.iter().map(|d| d.tokens.clone()).collect();
        let mut tape = crate::autodiff::Tape::<T>::new();
        let vars = bind_model(&mut tape, params, model)?;
        let enc = dyck_memory(&mut tape, &tokens, types, pad_to)?;
        let bases = vec![0; m];
        let out = decode_sequence(
            &mut tape,
            &vars,
            model,
            &enc,
            &bases,
            pad_to,
            true,
            Feedback::SelfLoop,
        )?;
        let sets: Vec<Vec<u16>> = out
            .step_logits
            .iter()
            .map(|v| threshold_sets(&tape, *v))
            .collect();
        for (i, inst) in instances.iter().enumerate() {
            let mut all = true;
            for (t, &want) in inst.labels.iter().enumerate() {
                positions += 1;
                if sets[t][i] == want {
                    correct += 1;
                } else {
                    all = false;
                }
            }
            exact += all as usize;
            total += 1;
        }
    }
    Ok(EvalScore {
        token_acc: 100.0 * correct as f64 / positions.max(1) as f64,
        seq_acc: 100.0 * exact as f64 / total.max(1) as f64,
        truncated: 0,
        n: total,
        positions,
    })
}

/// Score a model over `n` fresh instances drawn from `rng`, at lengths
/// `lo..=hi`.  Never mutates `params` — it only reads values into a tape.
pub fn evaluate<T: Scalar>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    lo: usize,
    hi: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EvalScore, HarnessError> {
    match model.flavor {
        Flavor::Algorithmic(task) => {
            debug_assert_eq!(lo, hi, "algorithmic modes test one exact length");
            evaluate_algorithmic(params, model, task, hi, n, rng)
        }
        Flavor::Dyck { types } => evaluate_dyck(params, model, types, lo, hi, n, rng),
    }
}

// ── checkpoint selection ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationPoint {
    pub step: usize,
    pub token_acc: f64,
}

/// Best validation accuracy; earliest step on ties.
pub fn select_checkpoint(points: &[ValidationPoint]) -> Result<ValidationPoint, HarnessError> {
    let mut best: Option<ValidationPoint> = None;
    for p in points {
        let better = match best {
            None => true,
            Some(b) => p.token_acc > b.token_acc,
        };
        if better {
            best = Some(*p);
        }
    }
    best.ok_or(HarnessError::NoValidations)
}

// ── training ────────────────────────────────────────────────────────────

/// Progress callbacks; the CLI throttles and prints these.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step { step: usize, steps: usize, loss: f64 },
    Validation { step: usize, mode: &'a str, token_acc: f64 },
    Evaluated { outcome: &'a EvalOutcome },
}

enum StepResult {
    Loss(f64),
    Diverged,
}

fn finish_step(
    params: &mut ParamSet<Real>,
    tape: &mut RealTape,
    loss: crate::autodiff::Var,
    adam: &AdamConfig,
    clip: f64,
) -> Result<StepResult, HarnessError> {
    let loss_val = tape.value(loss)[(0, 0)].as_f64();
    if !loss_val.is_finite() {
        return Ok(StepResult::Diverged);
    }
    tape.backward(loss)?;
    params.zero_grads();
    tape.harvest(params)?;
    match params.clip_grad_norm(clip) {
        Ok(_) => {}
        Err(EngineError::NonFinite { .. }) => return Ok(StepResult::Diverged),
        Err(e) => return Err(e.into()),
    }
    params.adam_step(adam)?;
    Ok(StepResult::Loss(loss_val))
}

fn algorithmic_train_step(
    params: &mut ParamSet<Real>,
    cfg: &RunConfig,
    task: Task,
    train_rng: &mut ChaCha8Rng,
    base_rng: &mut ChaCha8Rng,
) -> Result<StepResult, HarnessError> {
    let len = sample_length(task, cfg.train_len, train_rng);
    let instances: Vec<_> = (0..cfg.batch)
        .map(|_| gen_instance(task, len, train_rng))
        .collect::<Result<_, _>>()?;
    let bases = if needs_bank(&cfg.model) {
        sample_bases(&cfg.model, cfg.batch, base_rng)
    } else {
        vec![0; cfg.batch]
    };
    let input = batch_input::<Real>(&instances)?;
    let steps = input.targets.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let mut tape = RealTape::new();
    let vars = bind_model(&mut tape, params, &cfg.model)?;
    let enc = encode_sequence(&mut tape, &vars, &cfg.model, &input)?;
    let out = decode_sequence(
        &mut tape,
        &vars,
        &cfg.model,
        &enc,
        &bases,
        steps,
        false,
        Feedback::Zeros,
    )?;
    let targets = class_targets(&input.targets, steps);
    let loss = batch_loss(&mut tape, &out, &StepTargets::Classes(&targets))?;
    finish_step(params, &mut tape, loss, &cfg.adam, cfg.clip)
}

fn dyck_train_step(
    params: &mut ParamSet<Real>,
    cfg: &RunConfig,
    types: usize,
    batch: &[&DyckInstance],
) -> Result<StepResult, HarnessError> {
    let pad_to = batch.iter().map(|d| d.tokens.len()).max().unwrap_or(0);
    let tokens: Vec<Vec<usize>> = batch.iter().map(|d| d.tokens.clone()).collect();
    let labels: Vec<&[u16]> = batch.iter().map(|d| d.labels.as_slice()).collect();
    let classes = 2 * types + 1;
    let teacher = dyck_teacher::<Real>(&labels, classes, pad_to);
    let targets = dyck_targets::<Real>(&labels, classes, pad_to);
    let mut tape = RealTape::new();
    let vars = bind_model(&mut tape, params, &cfg.model)?;
    let enc = dyck_memory(&mut tape, &tokens, types, pad_to)?;
    let bases = vec![0; batch.len()];
    let out = decode_sequence(
        &mut tape,
        &vars,
        &cfg.model,
        &enc,
        &bases,
        pad_to,
        true,
        Feedback::Teacher(&teacher),
    )?;
    let loss = batch_loss(&mut tape, &out, &StepTargets::Sets(&targets))?;
    finish_step(params, &mut tape, loss, &cfg.adam, cfg.clip)
}

/// Length-sorted batches over a bracket dataset; the batch *order* is
/// reshuffled each epoch, batch membership stays fixed.
fn dyck_batches(dataset: &[DyckInstance], batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| (dataset[i].tokens.len(), i));
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Execute one configured run end to end: train, validate periodically,
/// restore the best checkpoint, evaluate every mode, and (optionally)
/// persist the winning checkpoint.
pub fn train_run(
    cfg: &RunConfig,
    ckpt_path: Option<&Path>,
    progress: &mut dyn FnMut(&TrainEvent),
) -> Result<RunRecord, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let flavor = cfg.model.flavor;

    let mut init_rng = stream_rng(cfg.seed, streams::INIT);
    let mut params = ParamSet::<Real>::new();
    init_model_params(&mut params, &cfg.model, &mut init_rng)?;

    let mut train_rng = stream_rng(cfg.seed, streams::TRAIN);
    let mut base_rng = stream_rng(cfg.seed, streams::BASES);
    let val_rng = stream_rng(cfg.seed, streams::VALIDATION);

    // Bracket runs draw their dataset up front from the training stream.
    let dyck_state: Option<(usize, Vec<DyckInstance>, Vec<Vec<usize>>)> = match flavor {
        Flavor::Dyck { types } => {
            let grammar = DyckParams::standard(types);
            let dataset: Vec<DyckInstance> = (0..cfg.dataset)
                .map(|_| gen_dyck(&grammar, 2, cfg.train_len, &mut train_rng))
                .collect::<Result<_, _>>()?;
            let batches = dyck_batches(&dataset, cfg.batch);
            Some((types, dataset, batches))
        }
        Flavor::Algorithmic(_) => None,
    };
    let mut batch_order: Vec<usize> = Vec::new();

    // Validation and tracked curves re-measure the same frozen sets every
    // time: the stream generator is cloned, never advanced.
    let mut tracked: Vec<EvalMode> = vec![EvalMode::NextLength];
    for m in &cfg.track_modes {
        if !tracked.contains(m) {
            tracked.push(*m);
        }
    }
    let mut curves: Vec<(EvalMode, Vec<(usize, f64)>)> =
        tracked.iter().map(|m| (*m, Vec::new())).collect();
    let mut history: Vec<ValidationPoint> = Vec::new();
    let mut best: Option<(f64, usize, ParamSet<Real>, Vec<(String, RngState)>)> = None;

    let mut diverged: Option<usize> = None;
    let mut loss_curve: Vec<(usize, f64)> = Vec::new();
    let sample_every = (cfg.steps / 256).max(1);

    macro_rules! validate_now {
        ($step:expr) => {{
            let step = $step;
            let mut primary_acc = 0.0;
            for (mode, curve) in curves.iter_mut() {
                let (lo, hi) = mode.lengths(flavor, cfg.train_len);
                let score =
                    evaluate(&params, &cfg.model, lo, hi, cfg.val_size, &mut val_rng.clone())?;
                curve.push((step, score.token_acc));
                if *mode == EvalMode::NextLength {
                    primary_acc = score.token_acc;
                    history.push(ValidationPoint { step, token_acc: score.token_acc });
                }
                progress(&TrainEvent::Validation {
                    step,
                    mode: mode.label(flavor),
                    token_acc: score.token_acc,
                });
            }
            let better = best.as_ref().map_or(true, |(acc, _, _, _)| primary_acc > *acc);
            if better {
                let rngs = vec![
                    ("train".to_string(), capture_rng(&train_rng)),
                    ("bases".to_string(), capture_rng(&base_rng)),
                ];
                best = Some((primary_acc, step, params.clone(), rngs));
            }
        }};
    }

    validate_now!(0);

    for step in 1..=cfg.steps {
        let result = match (&dyck_state, flavor) {
            (Some((types, dataset, batches)), _) => {
                let pos = (step - 1) % batches.len();
                if pos == 0 {
                    batch_order = (0..batches.len()).collect();
                    // Fisher-Yates off the training stream.
                    for i in (1..batch_order.len()).rev() {
                        let j = train_rng.gen_range(0..=i);
                        batch_order.swap(i, j);
                    }
                }
                let members = &batches[batch_order[pos]];
                let batch: Vec<&DyckInstance> = members.iter().map(|&i| &dataset[i]).collect();
                dyck_train_step(&mut params, cfg, *types, &batch)?
            }
            (None, Flavor::Algorithmic(task)) => {
                algorithmic_train_step(&mut params, cfg, task, &mut train_rng, &mut base_rng)?
            }
            (None, Flavor::Dyck { .. }) => unreachable!("dataset built above"),
        };
        let loss = match result {
            StepResult::Loss(l) => l,
            StepResult::Diverged => {
                diverged = Some(step);
                break;
            }
        };
        progress(&TrainEvent::Step { step, steps: cfg.steps, loss });
        if step % sample_every == 0 || step == cfg.steps {
            loss_curve.push((step, loss));
        }
        if step % cfg.val_every == 0 || step == cfg.steps {
            validate_now!(step);
        }
    }

    let (best_acc, best_step, best_params, best_rngs) =
        best.expect("validated at step 0 before training");
    let selected = select_checkpoint(&history)?;
    debug_assert_eq!(selected.step, best_step, "inline tracking matches selection");

    let mut evals = Vec::with_capacity(cfg.eval_modes.len());
    for (idx, mode) in cfg.eval_modes.iter().enumerate() {
        let mut rng = stream_rng(cfg.seed, streams::EVAL + idx as u64);
        let (lo, hi) = mode.lengths(flavor, cfg.train_len);
        let score = evaluate(&best_params, &cfg.model, lo, hi, cfg.n_eval, &mut rng)?;
        let outcome = EvalOutcome {
            mode: mode.label(flavor).to_string(),
            len: hi,
            n: score.n,
            token_acc: score.token_acc,
            seq_acc: score.seq_acc,
            truncated: score.truncated,
        };
        progress(&TrainEvent::Evaluated { outcome: &outcome });
        evals.push(outcome);
    }

    let checkpoint_path = match ckpt_path {
        Some(path) => {
            let ckpt = Checkpoint {
                config: cfg.model,
                step: best_step as u64,
                params: best_params.clone(),
                rngs: best_rngs,
            };
            save_checkpoint(path, &ckpt)?;
            path.display().to_string()
        }
        None => String::new(),
    };

    Ok(RunRecord {
        run_id: cfg.run_id(),
        config: cfg.clone(),
        param_count: parameter_count(&cfg.model)?,
        param_checksum: best_params.checksum(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        manifest_hash: String::new(),
        steps_done: diverged.map_or(cfg.steps, |s| s - 1),
        diverged,
        best_val_step: best_step,
        best_val_acc: best_acc,
        wall_s: started.elapsed().as_secs_f64(),
        checkpoint_path,
        loss_curve,
        val_curves: curves
            .into_iter()
            .map(|(m, c)| (m.label(flavor).to_string(), c))
            .collect(),
        evals,
    })
}

// ── run records ─────────────────────────────────────────────────────────

/// One mode's final accuracy block.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub mode: String,
    pub len: usize,
    pub n: usize,
    pub token_acc: f64,
    pub seq_acc: f64,
    pub truncated: usize,
}

/// Everything one run produced.  Records render to sectioned key=value
/// text; parsing them back yields byte-identical re-renders, which is what
/// makes report generation reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub param_count: usize,
    pub param_checksum: String,
    pub code_version: String,
    /// Hash of the manifest that launched the run; empty for ad-hoc runs.
    pub manifest_hash: String,
    pub steps_done: usize,
    pub diverged: Option<usize>,
    pub best_val_step: usize,
    pub best_val_acc: f64,
    pub wall_s: f64,
    pub checkpoint_path: String,
    pub loss_curve: Vec<(usize, f64)>,
    /// Validation-time accuracy curves keyed by mode label.
    pub val_curves: Vec<(String, Vec<(usize, f64)>)>,
    pub evals: Vec<EvalOutcome>,
}

fn render_points(points: &[(usize, f64)]) -> String {
    if points.is_empty() {
        return "-".to_string();
    }
    points
        .iter()
        .map(|(s, v)| format!("{s}:{v:.4}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_points(raw: &str) -> Result<Vec<(usize, f64)>, HarnessError> {
    if raw == "-" {
        return Ok(Vec::new());
    }
    raw.split(',')
        .map(|pair| {
            let (s, v) = pair.split_once(':').ok_or_else(|| HarnessError::BadConfig {
                what: format!("bad curve point '{pair}'"),
            })?;
            let step = s.parse().map_err(|_| HarnessError::BadConfig {
                what: format!("bad curve step '{s}'"),
            })?;
            let val = v.parse().map_err(|_| HarnessError::BadConfig {
                what: format!("bad curve value '{v}'"),
            })?;
            Ok((step, val))
        })
        .collect()
}

impl RunRecord {
    pub fn render(&self) -> String {
        let mut doc = KvDoc::new();
        let run = doc.add_section("run");
        run.push("id", &self.run_id);
        run.push("code_version", &self.code_version);
        run.push(
            "manifest_hash",
            if self.manifest_hash.is_empty() { "-" } else { &self.manifest_hash },
        );
        run.push("param_count", self.param_count);
        run.push("param_checksum", &self.param_checksum);
        run.push("steps_done", self.steps_done);
        match self.diverged {
            Some(step) => run.push("diverged", step),
            None => run.push("diverged", "-"),
        }
        run.push("best_val_step", self.best_val_step);
        run.push("best_val_acc", format!("{:.4}", self.best_val_acc));
        run.push("wall_s", format!("{:.3}", self.wall_s));
        run.push(
            "checkpoint",
            if self.checkpoint_path.is_empty() { "-" } else { &self.checkpoint_path },
        );
        self.config.write_kv(doc.add_section("config"));
        doc.add_section("loss")
            .push("points", render_points(&self.loss_curve));
        for (mode, points) in &self.val_curves {
            let section = doc.add_section("curve");
            section.push("mode", mode);
            section.push("points", render_points(points));
        }
        for e in &self.evals {
            let section = doc.add_section("eval");
            section.push("mode", &e.mode);
            section.push("len", e.len);
            section.push("n", e.n);
            section.push("token_acc", format!("{:.4}", e.token_acc));
            section.push("seq_acc", format!("{:.4}", e.seq_acc));
            section.push("truncated", e.truncated);
        }
        doc.render()
    }

    pub fn parse(text: &str) -> Result<RunRecord, HarnessError> {
        let doc = KvDoc::parse(text)?;
        let run = doc.require_section("run")?;
        let config = RunConfig::read_kv(doc.require_section("config")?)?;
        let opt = |s: &str| if s == "-" { None } else { Some(s.to_string()) };
        let diverged = match run.require("diverged")? {
            "-" => None,
            s => Some(s.parse().map_err(|_| HarnessError::BadConfig {
                what: format!("bad diverged step '{s}'"),
            })?),
        };
        let loss_curve = parse_points(doc.require_section("loss")?.require("points")?)?;
        let mut val_curves = Vec::new();
        for section in doc.sections_named("curve") {
            val_curves.push((
                section.require("mode")?.to_string(),
                parse_points(section.require("points")?)?,
            ));
        }
        let mut evals = Vec::new();
        for section in doc.sections_named("eval") {
            evals.push(EvalOutcome {
                mode: section.require("mode")?.to_string(),
                len: section.field("len", "usize")?,
                n: section.field("n", "usize")?,
                token_acc: section.field("token_acc", "f64")?,
                seq_acc: section.field("seq_acc", "f64")?,
                truncated: section.field("truncated", "usize")?,
            });
        }
        Ok(RunRecord {
            run_id: run.require("id")?.to_string(),
            config,
            param_count: run.field("param_count", "usize")?,
            param_checksum: run.require("param_checksum")?.to_string(),
            code_version: run.require("code_version")?.to_string(),
            manifest_hash: opt(run.require("manifest_hash")?).unwrap_or_default(),
            steps_done: run.field("steps_done", "usize")?,
            diverged,
            best_val_step: run.field("best_val_step", "usize")?,
            best_val_acc: run.field("best_val_acc", "f64")?,
            wall_s: run.field("wall_s", "f64")?,
            checkpoint_path: opt(run.require("checkpoint")?).unwrap_or_default(),
            loss_curve,
            val_curves,
            evals,
        })
    }

    /// The record minus volatile lines (wall time, checkpoint location):
    /// what "same seed, same record" means.
    pub fn deterministic_view(&self) -> String {
        self.render()
            .lines()
            .filter(|l| !l.starts_with("wall_s = ") && !l.starts_with("checkpoint = "))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// One aggregate-table row per evaluated mode.
    pub fn csv_rows(&self) -> Vec<String> {
        self.evals
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{},{},{},{:.4},{:.4},{},{:.3}",
                    self.config.task_label(),
                    self.config.model.kind.name(),
                    self.config.model.address_heads,
                    self.config.model.content_heads,
                    self.config.seed,
                    e.mode,
                    e.token_acc,
                    e.seq_acc,
                    self.steps_done,
                    self.wall_s
                )
            })
            .collect()
    }
}

pub const CSV_HEADER: &str = "task,variant,H_a,H_c,seed,mode,token_acc,seq_acc,steps,wall_s";

/// The aggregate table over a set of records, sorted so that regenerating
/// it from the same records is byte-identical regardless of read order.
pub fn aggregate_csv(records: &[RunRecord]) -> String {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for record in sorted {
        for row in record.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

/// Mean ± std of both accuracies per (task, variant, heads, mode), the
/// row shape of the paper-style result tables.  Population std, so a
/// single seed reports 0.
pub fn summary_csv(records: &[RunRecord]) -> String {
    type Key = (String, String, usize, usize, String);
    let mut groups: BTreeMap<Key, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for record in records {
        for e in &record.evals {
            let key = (
                record.config.task_label(),
                record.config.model.kind.name().to_string(),
                record.config.model.address_heads,
                record.config.model.content_heads,
                e.mode.clone(),
            );
            let entry = groups.entry(key).or_insert((e.len, Vec::new(), Vec::new()));
            entry.1.push(e.token_acc);
            entry.2.push(e.seq_acc);
        }
    }
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut out =
        String::from("task,variant,H_a,H_c,mode,len,seeds,token_mean,token_std,seq_mean,seq_std\n");
    for ((task, variant, ha, hc, mode), (len, tok, seq)) in &groups {
        let (tm, ts) = stats(tok);
        let (sm, ss) = stats(seq);
        out.push_str(&format!(
            "{task},{variant},{ha},{hc},{mode},{len},{},{tm:.4},{ts:.4},{sm:.4},{ss:.4}\n",
            tok.len()
        ));
    }
    out
}

// ── ablations ───────────────────────────────────────────────────────────

/// The head-count grid: every `(H_a, H_c)` with `H_a <= 3`, `H_c <= 2`,
/// minus the configurations where a content head would have no Mode-1
/// values to build its query from.  `(0, 0)` stays in deliberately — it is
/// the pointer model reduced to a plain recurrent decoder.
pub fn ablation_grid(base: &RunConfig) -> Vec<RunConfig> {
    let mut grid = Vec::new();
    for h_a in 0..=MAX_ADDRESS_HEADS {
        for h_c in 0..=MAX_CONTENT_HEADS {
            if h_a == 0 && h_c > 0 {
                continue;
            }
            let mut cfg = base.clone();
            cfg.model.address_heads = h_a;
            cfg.model.content_heads = h_c;
            if !cfg.track_modes.contains(&EvalMode::Double) {
                cfg.track_modes.push(EvalMode::Double);
            }
            grid.push(cfg);
        }
    }
    grid
}

/// Long-format table of the doubled-length validation curves, the data
/// behind accuracy-over-training ablation panels.
pub fn ablation_table(records: &[RunRecord]) -> String {
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    let mut out = String::from("task,variant,H_a,H_c,seed,step,token_acc\n");
    for record in sorted {
        let double = record.config.model.flavor;
        let label = EvalMode::Double.label(double);
        for (mode, points) in &record.val_curves {
            if mode != label {
                continue;
            }
            for (step, acc) in points {
                out.push_str(&format!(
                    "{},{},{},{},{},{step},{acc:.4}\n",
                    record.config.task_label(),
                    record.config.model.kind.name(),
                    record.config.model.address_heads,
                    record.config.model.content_heads,
                    record.config.seed,
                ));
            }
        }
    }
    out
}
