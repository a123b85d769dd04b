//! The memory-augmented sequence model and its plain seq2seq baseline.
//!
//! Both models share the same front half: token embeddings run through an
//! LSTM encoder whose per-step hidden states become the slots of an
//! immutable memory `M` (stacked layout, `(d, slots * batch)`).  They
//! differ behind the memory:
//!
//! * the pointer model reads `M` through address and content heads
//!   ([`crate::pointer`]), feeds the reads plus a decoder input `z_t` into
//!   a controller GRU, and emits logits from reads + controller state;
//! * the baseline hands the encoder's final state to a decoder LSTM and
//!   emits logits from its hidden state alone.
//!
//! Decoding is open-loop for the algorithmic tasks — `z_t` is zero, the
//! model must pace itself — and closed-loop for bracket prediction, where
//! `z_t` carries the previous label set and attention is masked to the
//! prefix read so far.  The end-of-answer symbol lives here, not in the
//! task generators: targets gain one trailing `EOS_CLASS` column and the
//! decoder is scored on producing it.

use ndarray::Array2;
use rand::Rng;
use std::error::Error;
use std::fmt;

use crate::address::{stacked_banks, AddressError};
use crate::autodiff::{
    bind_gru, bind_lstm, bind_mlp, gru_step, init_gru, init_lstm, init_mlp, lstm_step, mlp2, Act,
    EngineError, GruVars, LstmVars, MlpVars, ParamSet, Tape, Var,
};
use crate::pointer::{
    begin_pointer_context, bind_pointer_vars, init_pointer_heads, init_pointer_params,
    mode1_dereference, mode2_access, pointer_unit_step, PointerConfig, PointerError, PointerVars,
};
use crate::tasks::{Task, TaskInstance, ID_DIM, TOKEN_CLASSES};
use crate::Scalar;

/// Output class appended after the answer tokens.
pub const EOS_CLASS: usize = TOKEN_CLASSES;
/// Input vocabulary: the ten content tokens (queries reuse them).
pub const INPUT_VOCAB: usize = TOKEN_CLASSES;

// ── errors ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Unsupported { what: String },
    EmptyBatch,
    /// Sequences in one batch must present the same number of tokens.
    RaggedBatch { expect: usize, got: usize },
    MixedTasks,
    /// A causal step must look at a non-empty prefix that exists.
    StepOutOfRange { step: usize, slots: usize },
    /// The address space cannot cover the memory.
    MemoryTooLong { slots: usize, bits: usize },
    BadFeedback { what: &'static str },
    Engine(EngineError),
    Pointer(PointerError),
    Address(AddressError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Unsupported { what } => write!(f, "unsupported configuration: {what}"),
            ModelError::EmptyBatch => write!(f, "batch holds no sequences"),
            ModelError::RaggedBatch { expect, got } => {
                write!(f, "ragged batch: expected length {expect}, found {got}")
            }
            ModelError::MixedTasks => write!(f, "batch mixes different tasks"),
            ModelError::StepOutOfRange { step, slots } => {
                write!(f, "causal step {step} out of range for {slots} slots")
            }
            ModelError::MemoryTooLong { slots, bits } => {
                write!(f, "{slots} slots exceed the {bits}-bit address space")
            }
            ModelError::BadFeedback { what } => write!(f, "bad decoder feedback: {what}"),
            ModelError::Engine(e) => write!(f, "engine: {e}"),
            ModelError::Pointer(e) => write!(f, "pointer: {e}"),
            ModelError::Address(e) => write!(f, "address: {e}"),
        }
    }
}

impl Error for ModelError {}

impl From<EngineError> for ModelError {
    fn from(e: EngineError) -> Self {
        ModelError::Engine(e)
    }
}

impl From<PointerError> for ModelError {
    fn from(e: PointerError) -> Self {
        ModelError::Pointer(e)
    }
}

impl From<AddressError> for ModelError {
    fn from(e: AddressError) -> Self {
        ModelError::Address(e)
    }
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Pointer model: address/content heads + controller GRU.
    Panm,
    /// Encoder-decoder LSTM without memory access.
    LstmS2s,
    /// Attention baseline: a controller GRU that queries memory by content
    /// similarity to its own state.  No address bank, so any regularity it
    /// learns is tied to content, not position.
    ContentAttn,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Panm => "panm",
            ModelKind::LstmS2s => "lstm_s2s",
            ModelKind::ContentAttn => "content_attention",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "panm" => Some(ModelKind::Panm),
            "lstm_s2s" => Some(ModelKind::LstmS2s),
            "content_attention" => Some(ModelKind::ContentAttn),
            _ => None,
        }
    }
}

/// What the model is reading and predicting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    /// Token-sequence task: embedded input, LSTM-encoded memory, softmax
    /// tokens + end symbol out.
    Algorithmic(Task),
    /// Bracket prediction over `types` bracket pairs: raw one-hot memory,
    /// multi-hot label sets out, causal attention.
    Dyck { types: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub flavor: Flavor,
    pub embed_dim: usize,
    /// Encoder / controller / decoder width; equals the memory value
    /// dimension for algorithmic tasks.
    pub hidden: usize,
    pub bits: usize,
    pub address_heads: usize,
    pub content_heads: usize,
    pub head_dim: usize,
    pub key_hidden: usize,
    pub out_hidden: usize,
}

impl ModelConfig {
    /// Extra input channels riding along with the token embedding.
    pub fn extra_dim(&self) -> usize {
        match self.flavor {
            Flavor::Algorithmic(Task::PrioritySort) => 1,
            Flavor::Algorithmic(Task::IdSort) => ID_DIM,
            _ => 0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.embed_dim + self.extra_dim()
    }

    /// Width of one memory slot.
    pub fn mem_dim(&self) -> usize {
        match self.flavor {
            Flavor::Algorithmic(_) => self.hidden,
            Flavor::Dyck { types } => 2 * types,
        }
    }

    pub fn out_classes(&self) -> usize {
        match self.flavor {
            Flavor::Algorithmic(_) => TOKEN_CLASSES + 1,
            Flavor::Dyck { types } => 2 * types + 1,
        }
    }

    /// Decoder input width: zeros for algorithmic tasks, the previous label
    /// set for bracket prediction.
    pub fn z_dim(&self) -> usize {
        match self.flavor {
            Flavor::Algorithmic(_) => self.embed_dim,
            Flavor::Dyck { types } => 2 * types + 1,
        }
    }

    /// Combined width of all head reads.
    pub fn reads_dim(&self) -> usize {
        (self.address_heads + self.content_heads) * self.mem_dim()
    }

    pub fn pointer_config(&self) -> PointerConfig {
        PointerConfig {
            bits: self.bits,
            address_heads: self.address_heads,
            content_heads: self.content_heads,
            head_dim: self.head_dim,
            key_hidden: self.key_hidden,
            mem_dim: self.mem_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.out_hidden == 0 {
            return Err(ModelError::Unsupported {
                what: "hidden widths must be positive".into(),
            });
        }
        match self.flavor {
            Flavor::Algorithmic(_) => {
                if self.embed_dim == 0 {
                    return Err(ModelError::Unsupported {
                        what: "embedding width must be positive".into(),
                    });
                }
            }
            Flavor::Dyck { types } => {
                if !(1..=6).contains(&types) {
                    return Err(ModelError::Unsupported {
                        what: format!("{types} bracket types outside 1..=6"),
                    });
                }
                if self.kind == ModelKind::LstmS2s {
                    return Err(ModelError::Unsupported {
                        what: "bracket prediction has no seq2seq baseline here".into(),
                    });
                }
            }
        }
        if self.kind == ModelKind::Panm {
            self.pointer_config().validate()?;
        }
        if self.kind == ModelKind::ContentAttn && self.key_hidden == 0 {
            return Err(ModelError::Unsupported {
                what: "attention query width must be positive".into(),
            });
        }
        Ok(())
    }
}

// ── parameters ──────────────────────────────────────────────────────────

pub fn init_model_params<T: Scalar>(
    params: &mut ParamSet<T>,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<(), ModelError> {
    cfg.validate()?;
    if let Flavor::Algorithmic(_) = cfg.flavor {
        params.init_uniform("embed", cfg.embed_dim, INPUT_VOCAB, cfg.embed_dim, rng)?;
        init_lstm(params, "enc", cfg.in_dim(), cfg.hidden, rng)?;
    }
    match cfg.kind {
        ModelKind::Panm => {
            init_pointer_params(params, "ptr", &cfg.pointer_config(), rng)?;
            init_gru(
                params,
                "ctrl",
                cfg.reads_dim() + cfg.z_dim(),
                cfg.hidden,
                rng,
            )?;
            init_mlp(
                params,
                "out",
                cfg.reads_dim() + cfg.hidden,
                cfg.out_hidden,
                cfg.out_classes(),
                rng,
            )?;
        }
        ModelKind::LstmS2s => {
            init_lstm(params, "dec", cfg.z_dim(), cfg.hidden, rng)?;
            init_mlp(
                params,
                "out",
                cfg.hidden,
                cfg.out_hidden,
                cfg.out_classes(),
                rng,
            )?;
        }
        ModelKind::ContentAttn => {
            init_mlp(
                params,
                "att.query",
                cfg.hidden,
                cfg.key_hidden,
                cfg.mem_dim(),
                rng,
            )?;
            init_gru(
                params,
                "ctrl",
                cfg.mem_dim() + cfg.z_dim(),
                cfg.hidden,
                rng,
            )?;
            init_mlp(
                params,
                "out",
                cfg.mem_dim() + cfg.hidden,
                cfg.out_hidden,
                cfg.out_classes(),
                rng,
            )?;
        }
    }
    Ok(())
}

/// Total trainable scalars for a configuration (reported in run records so
/// model sizes can be compared; nothing enforces a budget).
pub fn parameter_count(cfg: &ModelConfig) -> Result<usize, ModelError> {
    use rand::SeedableRng;
    let mut params = ParamSet::<f64>::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    init_model_params(&mut params, cfg, &mut rng)?;
    Ok(params.scalar_count())
}

pub struct ModelVars {
    pub embed: Option<Var>,
    pub enc: Option<LstmVars>,
    pub ptr: Option<PointerVars>,
    pub ctrl: Option<GruVars>,
    pub dec: Option<LstmVars>,
    pub att: Option<MlpVars>,
    pub out: MlpVars,
}

pub fn bind_model<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    cfg: &ModelConfig,
) -> Result<ModelVars, ModelError> {
    cfg.validate()?;
    let (embed, enc) = match cfg.flavor {
        Flavor::Algorithmic(_) => (
            Some(tape.bind(params, "embed")?),
            Some(bind_lstm(tape, params, "enc")?),
        ),
        Flavor::Dyck { .. } => (None, None),
    };
    let (ptr, ctrl, dec, att) = match cfg.kind {
        ModelKind::Panm => (
            Some(bind_pointer_vars(tape, params, "ptr", &cfg.pointer_config())?),
            Some(bind_gru(tape, params, "ctrl")?),
            None,
            None,
        ),
        ModelKind::LstmS2s => (None, None, Some(bind_lstm(tape, params, "dec")?), None),
        ModelKind::ContentAttn => (
            None,
            Some(bind_gru(tape, params, "ctrl")?),
            None,
            Some(bind_mlp(tape, params, "att.query")?),
        ),
    };
    let out = bind_mlp(tape, params, "out")?;
    Ok(ModelVars {
        embed,
        enc,
        ptr,
        ctrl,
        dec,
        att,
        out,
    })
}

// ── batched input ───────────────────────────────────────────────────────

/// A batch of same-length instances rearranged for stepwise encoding.
pub struct BatchInput<T: Scalar> {
    pub task: Task,
    pub len: usize,
    pub batch: usize,
    /// Per input step: each sequence's token id.
    pub ids: Vec<Vec<usize>>,
    /// Per input step: extra channels `(extra_dim, batch)`; empty when the
    /// task has none.
    pub extras: Vec<Array2<T>>,
    /// Raw per-sequence targets (no end symbol).
    pub targets: Vec<Vec<usize>>,
}

pub fn batch_input<T: Scalar>(instances: &[TaskInstance]) -> Result<BatchInput<T>, ModelError> {
    let first = instances.first().ok_or(ModelError::EmptyBatch)?;
    let (task, len, batch) = (first.task, first.input.len(), instances.len());
    for inst in instances {
        if inst.task != task {
            return Err(ModelError::MixedTasks);
        }
        if inst.input.len() != len {
            return Err(ModelError::RaggedBatch {
                expect: len,
                got: inst.input.len(),
            });
        }
    }
    let ids = (0..len)
        .map(|j| instances.iter().map(|inst| inst.input[j]).collect())
        .collect();
    let extra_dim = match task {
        Task::PrioritySort => 1,
        Task::IdSort => ID_DIM,
        _ => 0,
    };
    let extras = if extra_dim == 0 {
        Vec::new()
    } else {
        (0..len)
            .map(|j| {
                Array2::from_shape_fn((extra_dim, batch), |(r, i)| {
                    let inst = &instances[i];
                    T::from_f64(match task {
                        Task::PrioritySort => inst.scores[j],
                        Task::IdSort => inst.ids[j][r],
                        _ => unreachable!("extra channels exist only for sort tasks"),
                    })
                })
            })
            .collect()
    };
    let targets = instances.iter().map(|inst| inst.target.clone()).collect();
    Ok(BatchInput {
        task,
        len,
        batch,
        ids,
        extras,
        targets,
    })
}

// ── encoding ────────────────────────────────────────────────────────────

/// The write-once memory plus whatever the decoder needs to start.
pub struct Encoded {
    /// `(mem_dim, slots * batch)`, stacked layout.
    pub memory: Var,
    pub slots: usize,
    pub batch: usize,
    pub final_h: Var,
    pub final_c: Var,
}

/// Run the encoder over a batch and lay its hidden states into memory
/// slots.  Used identically by the pointer model and the baseline.
pub fn encode_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    input: &BatchInput<T>,
) -> Result<Encoded, ModelError> {
    let (embed, enc) = match (&vars.embed, &vars.enc) {
        (Some(e), Some(l)) => (*e, l),
        _ => {
            return Err(ModelError::Unsupported {
                what: "this flavor encodes no token sequences (build the memory directly)".into(),
            })
        }
    };
    let n = input.batch;
    if n == 0 || input.len == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let mut h = tape.constant(Array2::zeros((cfg.hidden, n)));
    let mut c = tape.constant(Array2::zeros((cfg.hidden, n)));
    let mut slots = Vec::with_capacity(input.len);
    for j in 0..input.len {
        let tok = tape.gather_cols(embed, &input.ids[j])?;
        let x = if input.extras.is_empty() {
            tok
        } else {
            let extra = tape.constant(input.extras[j].clone());
            tape.concat_rows(&[tok, extra])?
        };
        let (h2, c2) = lstm_step(tape, enc, x, h, c)?;
        h = h2;
        c = c2;
        slots.push(h);
    }
    let memory = tape.concat_cols(&slots)?;
    Ok(Encoded {
        memory,
        slots: input.len,
        batch: n,
        final_h: h,
        final_c: c,
    })
}

/// Raw one-hot memory for bracket prediction: no encoder, the decoder sees
/// tokens exactly as presented.  Sequences shorter than `pad_to` get
/// all-zero slots, which masked attention never reaches.
pub fn dyck_memory<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: &[Vec<usize>],
    types: usize,
    pad_to: usize,
) -> Result<Encoded, ModelError> {
    let n = tokens.len();
    if n == 0 || pad_to == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let vocab = 2 * types;
    let mut mem = Array2::zeros((vocab, pad_to * n));
    for (i, seq) in tokens.iter().enumerate() {
        if seq.len() > pad_to {
            return Err(ModelError::RaggedBatch {
                expect: pad_to,
                got: seq.len(),
            });
        }
        for (j, &tok) in seq.iter().enumerate() {
            if tok >= vocab {
                return Err(ModelError::Unsupported {
                    what: format!("token {tok} outside the {vocab}-symbol bracket vocabulary"),
                });
            }
            mem[(tok, j * n + i)] = T::one();
        }
    }
    let memory = tape.constant(mem);
    let zero = tape.constant(Array2::zeros((1, n)));
    Ok(Encoded {
        memory,
        slots: pad_to,
        batch: n,
        final_h: zero,
        final_c: zero,
    })
}

// ── decoding ────────────────────────────────────────────────────────────

/// How many slots a causal decoder may see at 1-based step `step`.
pub fn causal_view(step: usize, slots: usize) -> Result<usize, ModelError> {
    if step == 0 || step > slots {
        return Err(ModelError::StepOutOfRange { step, slots });
    }
    Ok(step)
}

/// What drives the decoder input `z_t`.
pub enum Feedback<'a, T: Scalar> {
    /// `z_t = 0`: the open-loop protocol for algorithmic tasks.
    Zeros,
    /// Ground-truth previous label sets, one `(z_dim, batch)` matrix per
    /// step (entry 0 is ignored; the first step always gets zeros).
    Teacher(&'a [Array2<T>]),
    /// Feed back the previous step's own thresholded prediction.
    SelfLoop,
}

/// One controller update: reads and decoder input in, new state out.
pub fn controller_step<T: Scalar>(
    tape: &mut Tape<T>,
    ctrl: &GruVars,
    reads: &[Var],
    z: Var,
    h: Var,
) -> Result<Var, EngineError> {
    let mut parts: Vec<Var> = reads.to_vec();
    parts.push(z);
    let x = tape.concat_rows(&parts)?;
    gru_step(tape, ctrl, x, h)
}

/// Output head: logits from the current reads and controller state.
pub fn output_logits<T: Scalar>(
    tape: &mut Tape<T>,
    out: &MlpVars,
    reads: &[Var],
    h: Var,
) -> Result<Var, EngineError> {
    let mut parts: Vec<Var> = reads.to_vec();
    parts.push(h);
    let x = tape.concat_rows(&parts)?;
    mlp2(tape, out, x, Act::Tanh)
}

#[derive(Debug)]
pub struct DecodeOut {
    /// `(out_classes, batch)` logits per decode step.
    pub step_logits: Vec<Var>,
}

/// Build the decode graph for `steps` steps over an encoded batch.
///
/// `bases` gives each sequence's base address (the bank covers
/// `bases[i] .. bases[i] + slots`).  With `causal` set, step `t` attends
/// only to the first `t+1` slots and the controller starts from zeros
/// instead of the memory column sum, so nothing of the future leaks in.
pub fn decode_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ModelVars,
    cfg: &ModelConfig,
    enc: &Encoded,
    bases: &[usize],
    steps: usize,
    causal: bool,
    feedback: Feedback<'_, T>,
) -> Result<DecodeOut, ModelError> {
    let n = enc.batch;
    if steps == 0 {
        return Err(ModelError::StepOutOfRange {
            step: 0,
            slots: enc.slots,
        });
    }
    if causal && steps > enc.slots {
        return Err(ModelError::StepOutOfRange {
            step: steps,
            slots: enc.slots,
        });
    }
    if let Feedback::Teacher(seq) = &feedback {
        if seq.len() != steps {
            return Err(ModelError::BadFeedback {
                what: "teacher feedback must cover every decode step",
            });
        }
    }
    if matches!(feedback, Feedback::SelfLoop) && cfg.z_dim() != cfg.out_classes() {
        return Err(ModelError::BadFeedback {
            what: "self-loop feedback needs matching label and input widths",
        });
    }

    // Decoder input for step `t`: zeros at the first step, then whatever the
    // feedback mode dictates looking at the previous step's logits.
    let zero_z = tape.constant(Array2::zeros((cfg.z_dim(), n)));
    let feedback_z = |tape: &mut Tape<T>, t: usize, prev: Option<Var>| -> Var {
        match (&feedback, t, prev) {
            (Feedback::Zeros, _, _) | (_, 0, _) | (_, _, None) => zero_z,
            (Feedback::Teacher(seq), t, _) => tape.constant(seq[t].clone()),
            (Feedback::SelfLoop, _, Some(prev)) => {
                let mut z = Array2::zeros((cfg.z_dim(), n));
                let logits = tape.value(prev);
                for i in 0..n {
                    for r in 0..cfg.z_dim() {
                        if logits[(r, i)] > T::zero() {
                            z[(r, i)] = T::one();
                        }
                    }
                }
                tape.constant(z)
            }
        }
    };

    match cfg.kind {
        ModelKind::LstmS2s => {
            let dec = vars.dec.as_ref().expect("bind_model built a decoder");
            let mut h = enc.final_h;
            let mut c = enc.final_c;
            let mut step_logits: Vec<Var> = Vec::with_capacity(steps);
            for t in 0..steps {
                let z = feedback_z(tape, t, step_logits.last().copied());
                let (h2, c2) = lstm_step(tape, dec, z, h, c)?;
                h = h2;
                c = c2;
                step_logits.push(mlp2(tape, &vars.out, h, Act::Tanh)?);
            }
            Ok(DecodeOut { step_logits })
        }
        ModelKind::ContentAttn => {
            let ctrl = vars.ctrl.as_ref().expect("bind_model built a controller");
            let att = vars.att.as_ref().expect("bind_model built a query head");
            let mut h = if causal {
                tape.constant(Array2::zeros((cfg.hidden, n)))
            } else {
                tape.mem_colsum(enc.memory, n)?
            };
            let mut step_logits: Vec<Var> = Vec::with_capacity(steps);
            for t in 0..steps {
                let visible = if causal {
                    causal_view(t + 1, enc.slots)?
                } else {
                    enc.slots
                };
                let q = mlp2(tape, att, h, Act::Tanh)?;
                let scores = tape.cosine_cols(q, enc.memory, n)?;
                let w = tape.softmax_cols(scores, visible)?;
                let read = tape.deref(enc.memory, w)?;
                let z = feedback_z(tape, t, step_logits.last().copied());
                h = controller_step(tape, ctrl, &[read], z, h)?;
                step_logits.push(output_logits(tape, &vars.out, &[read], h)?);
            }
            Ok(DecodeOut { step_logits })
        }
        ModelKind::Panm => {
            let ctrl = vars.ctrl.as_ref().expect("bind_model built a controller");
            let ptr = vars.ptr.as_ref().expect("bind_model built pointer heads");
            let walk = if cfg.address_heads > 0 {
                if enc.slots > crate::address::address_space(cfg.bits) {
                    return Err(ModelError::MemoryTooLong {
                        slots: enc.slots,
                        bits: cfg.bits,
                    });
                }
                if bases.len() != n {
                    return Err(ModelError::RaggedBatch {
                        expect: n,
                        got: bases.len(),
                    });
                }
                let bank = stacked_banks::<T>(bases, enc.slots, cfg.bits)?;
                let ctx = begin_pointer_context(tape, ptr, bank, enc.slots, n)?;
                let state = init_pointer_heads(tape, &cfg.pointer_config(), &ctx)?;
                Some((ctx, state))
            } else {
                None
            };
            let (ctx, mut state) = match walk {
                Some((ctx, state)) => (Some(ctx), Some(state)),
                None => (None, None),
            };

            let mut h = if causal {
                tape.constant(Array2::zeros((cfg.hidden, n)))
            } else {
                tape.mem_colsum(enc.memory, n)?
            };
            let mut step_logits: Vec<Var> = Vec::with_capacity(steps);

            for t in 0..steps {
                let visible = if causal {
                    causal_view(t + 1, enc.slots)?
                } else {
                    enc.slots
                };
                let mut reads = Vec::new();
                if let (Some(ctx), Some(st)) = (&ctx, &state) {
                    let step = pointer_unit_step(tape, ptr, ctx, st, visible)?;
                    let mode1 = mode1_dereference(tape, enc.memory, &step.weights)?;
                    let mode2 =
                        mode2_access(tape, ptr, enc.memory, &mode1, n, visible)?;
                    reads.extend(mode1);
                    reads.extend(mode2.into_iter().map(|r| r.value));
                    state = Some(step.state);
                }
                let z = feedback_z(tape, t, step_logits.last().copied());
                h = controller_step(tape, ctrl, &reads, z, h)?;
                step_logits.push(output_logits(tape, &vars.out, &reads, h)?);
            }
            Ok(DecodeOut { step_logits })
        }
    }
}

// ── losses and readouts ─────────────────────────────────────────────────

/// Per-step supervision.
pub enum StepTargets<'a, T: Scalar> {
    /// Softmax classes: `targets[t][i]` is sequence `i`'s class at step
    /// `t`, `None` once the sequence (answer + end symbol) is over.
    Classes(&'a [Vec<Option<usize>>]),
    /// Multi-hot sets per step with per-sequence activity flags.
    Sets(&'a [(Array2<T>, Vec<bool>)]),
}

/// Mean over the batch of each sequence's summed per-step loss.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &DecodeOut,
    targets: &StepTargets<'_, T>,
) -> Result<Var, ModelError> {
    let steps = out.step_logits.len();
    let batch = out.step_logits.first().map(|v| v.cols).unwrap_or(0);
    if batch == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    let add = |tape: &mut Tape<T>, term: Var, total: &mut Option<Var>| {
        *total = Some(match *total {
            Some(acc) => tape.add(acc, term).expect("scalar accumulation"),
            None => term,
        });
    };
    match targets {
        StepTargets::Classes(step_targets) => {
            if step_targets.len() != steps {
                return Err(ModelError::RaggedBatch {
                    expect: steps,
                    got: step_targets.len(),
                });
            }
            for (t, logits) in out.step_logits.iter().enumerate() {
                let term = tape.cross_entropy_cols(*logits, &step_targets[t])?;
                add(tape, term, &mut total);
            }
        }
        StepTargets::Sets(step_targets) => {
            if step_targets.len() != steps {
                return Err(ModelError::RaggedBatch {
                    expect: steps,
                    got: step_targets.len(),
                });
            }
            for (t, logits) in out.step_logits.iter().enumerate() {
                let (sets, active) = &step_targets[t];
                let term = tape.bce_multihot_cols(*logits, sets.clone(), active)?;
                add(tape, term, &mut total);
            }
        }
    }
    let total = total.ok_or(ModelError::EmptyBatch)?;
    Ok(tape.scale(total, T::from_f64(1.0 / batch as f64)))
}

/// Expand raw targets into per-step classes: the answer tokens, then one
/// end symbol, then `None` padding out to `steps`.
pub fn class_targets(targets: &[Vec<usize>], steps: usize) -> Vec<Vec<Option<usize>>> {
    (0..steps)
        .map(|t| {
            targets
                .iter()
                .map(|seq| match t.cmp(&seq.len()) {
                    std::cmp::Ordering::Less => Some(seq[t]),
                    std::cmp::Ordering::Equal => Some(EOS_CLASS),
                    std::cmp::Ordering::Greater => None,
                })
                .collect()
        })
        .collect()
}

/// Greedy readout: the argmax class per column.
pub fn greedy_tokens<T: Scalar>(tape: &Tape<T>, logits: Var) -> Vec<usize> {
    let v = tape.value(logits);
    (0..v.ncols())
        .map(|i| {
            let col = v.column(i);
            let mut best = 0;
            for r in 1..v.nrows() {
                if col[r] > col[best] {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// Thresholded multi-hot readout: bit `k` set when class `k`'s sigmoid
/// clears one half (equivalently, its logit is positive).
pub fn threshold_sets<T: Scalar>(tape: &Tape<T>, logits: Var) -> Vec<u16> {
    let v = tape.value(logits);
    (0..v.ncols())
        .map(|i| {
            let mut set = 0u16;
            for r in 0..v.nrows().min(16) {
                if v[(r, i)] > T::zero() {
                    set |= 1 << r;
                }
            }
            set
        })
        .collect()
}

// ── config text form ────────────────────────────────────────────────────

impl Flavor {
    /// `algorithmic:<task>` or `dyck:<types>`.
    pub fn name(&self) -> String {
        match self {
            Flavor::Algorithmic(task) => format!("algorithmic:{task}"),
            Flavor::Dyck { types } => format!("dyck:{types}"),
        }
    }

    pub fn parse(s: &str) -> Option<Flavor> {
        let (head, rest) = s.split_once(':')?;
        match head {
            "algorithmic" => rest.parse().ok().map(Flavor::Algorithmic),
            "dyck" => rest.parse().ok().map(|types| Flavor::Dyck { types }),
            _ => None,
        }
    }
}

impl ModelConfig {
    /// Write every field into `section` (checkpoint headers, run records).
    pub fn write_kv(&self, section: &mut crate::textio::KvSection) {
        section.push("kind", self.kind.name());
        section.push("flavor", self.flavor.name());
        section.push("embed_dim", self.embed_dim);
        section.push("hidden", self.hidden);
        section.push("bits", self.bits);
        section.push("address_heads", self.address_heads);
        section.push("content_heads", self.content_heads);
        section.push("head_dim", self.head_dim);
        section.push("key_hidden", self.key_hidden);
        section.push("out_hidden", self.out_hidden);
    }

    /// Inverse of [`ModelConfig::write_kv`]; the result is re-validated.
    pub fn read_kv(section: &crate::textio::KvSection) -> Result<Self, ModelError> {
        let bad = |what: String| ModelError::Unsupported { what };
        let kind_s = section
            .require("kind")
            .map_err(|e| bad(e.to_string()))?;
        let kind = ModelKind::parse(kind_s)
            .ok_or_else(|| bad(format!("unknown model kind '{kind_s}'")))?;
        let flavor_s = section
            .require("flavor")
            .map_err(|e| bad(e.to_string()))?;
        let flavor = Flavor::parse(flavor_s)
            .ok_or_else(|| bad(format!("unknown flavor '{flavor_s}'")))?;
        let field = |key: &'static str| -> Result<usize, ModelError> {
            section.field(key, "usize").map_err(|e| bad(e.to_string()))
        };
        let cfg = ModelConfig {
            kind,
            flavor,
            embed_dim: field("embed_dim")?,
            hidden: field("hidden")?,
            bits: field("bits")?,
            address_heads: field("address_heads")?,
            content_heads: field("content_heads")?,
            head_dim: field("head_dim")?,
            key_hidden: field("key_hidden")?,
            out_hidden: field("out_hidden")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────

/// Position of a counter-mode generator, enough to resume its stream
/// exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn capture_rng(rng: &rand_chacha::ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore_rng(state: &RngState) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Format { what: String },
    /// Stored digest does not match the payload — truncated or tampered file.
    ChecksumMismatch,
    ScalarMismatch { expect: &'static str, found: String },
    Engine(EngineError),
    Model(ModelError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::Format { what } => write!(f, "malformed checkpoint: {what}"),
            CheckpointError::ChecksumMismatch => write!(f, "checkpoint digest mismatch"),
            CheckpointError::ScalarMismatch { expect, found } => {
                write!(f, "checkpoint holds {found} scalars, expected {expect}")
            }
            CheckpointError::Engine(e) => write!(f, "checkpoint engine: {e}"),
            CheckpointError::Model(e) => write!(f, "checkpoint config: {e}"),
        }
    }
}

impl Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<EngineError> for CheckpointError {
    fn from(e: EngineError) -> Self {
        CheckpointError::Engine(e)
    }
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Model(e)
    }
}

/// Everything needed to resume or evaluate a training run: the model
/// configuration, parameter tensors with their optimizer moments, the
/// training step counter, and the positions of the named random streams.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: ModelConfig,
    /// Training steps completed when the snapshot was taken.
    pub step: u64,
    /// Values plus Adam moments and the optimizer step counter.
    pub params: ParamSet<T>,
    pub rngs: Vec<(String, RngState)>,
}

/// File identity: `PANMCKP` + format version byte.  The byte layout is
/// documented in `docs/checkpoint-format.md` and is append-only across
/// versions.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PANMCKP\x01";

fn scalar_tag<T: Scalar>() -> &'static str {
    match std::mem::size_of::<T>() {
        4 => "f32",
        8 => "f64",
        _ => "unknown",
    }
}

fn put_scalar<T: Scalar>(buf: &mut Vec<u8>, x: T) {
    match std::mem::size_of::<T>() {
        4 => buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
        _ => buf.extend_from_slice(&x.as_f64().to_le_bytes()),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format {
                what: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128, CheckpointError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<&'a str, CheckpointError> {
        std::str::from_utf8(self.take(n)?).map_err(|_| CheckpointError::Format {
            what: "non-utf8 name".to_string(),
        })
    }

    fn scalar<T: Scalar>(&mut self) -> Result<T, CheckpointError> {
        Ok(match std::mem::size_of::<T>() {
            4 => T::from_f64(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64),
            _ => T::from_f64(f64::from_le_bytes(self.take(8)?.try_into().unwrap())),
        })
    }
}

/// Serialize a checkpoint to its on-disk byte layout (digest included).
pub fn checkpoint_bytes<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    use sha2::{Digest, Sha256};
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);

    let mut doc = crate::textio::KvDoc::new();
    let head = doc.add_section("checkpoint");
    head.push("scalar", scalar_tag::<T>());
    head.push("step", ckpt.step);
    head.push("adam_step", ckpt.params.step);
    ckpt.config.write_kv(doc.add_section("config"));
    let header = doc.render();
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());

    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, p) in ckpt.params.iter() {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
        for &x in p.value.iter() {
            put_scalar(&mut buf, x);
        }
        for &x in p.m.iter() {
            put_scalar(&mut buf, x);
        }
        for &x in p.v.iter() {
            put_scalar(&mut buf, x);
        }
    }

    buf.push(ckpt.rngs.len() as u8);
    for (name, st) in &ckpt.rngs {
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&st.seed);
        buf.extend_from_slice(&st.stream.to_le_bytes());
        buf.extend_from_slice(&st.word_pos.to_le_bytes());
    }

    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Parse checkpoint bytes, verifying the trailing digest first.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    use sha2::{Digest, Sha256};
    if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
        return Err(CheckpointError::Format {
            what: format!("{} bytes is too short", bytes.len()),
        });
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(CheckpointError::ChecksumMismatch);
    }
    let mut r = Reader { buf: payload, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format {
            what: "bad magic".to_string(),
        });
    }

    let header_len = r.u32()? as usize;
    let header = r.str(header_len)?;
    let doc = crate::textio::KvDoc::parse(header).map_err(|e| CheckpointError::Format {
        what: format!("header: {e}"),
    })?;
    let head = doc
        .require_section("checkpoint")
        .map_err(|e| CheckpointError::Format { what: e.to_string() })?;
    let found = head
        .require("scalar")
        .map_err(|e| CheckpointError::Format { what: e.to_string() })?;
    if found != scalar_tag::<T>() {
        return Err(CheckpointError::ScalarMismatch {
            expect: scalar_tag::<T>(),
            found: found.to_string(),
        });
    }
    let step: u64 = head
        .field("step", "u64")
        .map_err(|e| CheckpointError::Format { what: e.to_string() })?;
    let adam_step: u64 = head
        .field("adam_step", "u64")
        .map_err(|e| CheckpointError::Format { what: e.to_string() })?;
    let config = ModelConfig::read_kv(
        doc.require_section("config")
            .map_err(|e| CheckpointError::Format { what: e.to_string() })?,
    )?;

    let n_params = r.u32()? as usize;
    let mut params = ParamSet::<T>::new();
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = r.str(name_len)?.to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let read_array = |r: &mut Reader<'_>| -> Result<Array2<T>, CheckpointError> {
            let mut a = Array2::zeros((rows, cols));
            for row in 0..rows {
                for col in 0..cols {
                    a[(row, col)] = r.scalar::<T>()?;
                }
            }
            Ok(a)
        };
        let value = read_array(&mut r)?;
        let m = read_array(&mut r)?;
        let v = read_array(&mut r)?;
        params.insert(&name, value)?;
        let p = params.get_mut(&name)?;
        p.m = m;
        p.v = v;
    }
    params.step = adam_step;

    let n_rngs = r.u8()? as usize;
    let mut rngs = Vec::with_capacity(n_rngs);
    for _ in 0..n_rngs {
        let name_len = r.u8()? as usize;
        let name = r.str(name_len)?.to_string();
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = r.u128()?;
        rngs.push((name, RngState { seed, stream, word_pos }));
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::Format {
            what: format!("{} trailing bytes", payload.len() - r.pos),
        });
    }

    Ok(Checkpoint {
        config,
        step,
        params,
        rngs,
    })
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save_checkpoint<T: Scalar>(
    path: &std::path::Path,
    ckpt: &Checkpoint<T>,
) -> Result<(), CheckpointError> {
    let bytes = checkpoint_bytes(ckpt);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    path: &std::path::Path,
) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}
