//! Named experiment scales and the resolution of a run request into
//! concrete [`RunConfig`]s.
//!
//! A profile fixes every knob a request doesn't spell out.  `quick` exists
//! for plumbing tests, `smoke` is the desk-scale default (hidden 128, 20K
//! steps), `paper` is the full-scale reference (hidden 256, 50K steps).

use panm_core::autodiff::AdamConfig;
use panm_core::harness::{EvalMode, RunConfig};
use panm_core::model::{Flavor, ModelConfig, ModelKind};
use panm_core::tasks::Task;

use crate::{usage, Failure};

#[derive(Debug, Clone, Copy)]
pub struct Profile {
    pub name: &'static str,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Pointer-unit recurrent width (also the address-key space).  Kept at
    /// controller scale: the walking GRU holds the position estimate, and
    /// starving it collapses length extrapolation long before it hurts
    /// training-length accuracy.
    pub head_dim: usize,
    pub key_hidden: usize,
    pub out_hidden: usize,
    pub steps: usize,
    pub batch: usize,
    pub bits: usize,
    pub train_len: usize,
    pub n_eval: usize,
    pub val_every: usize,
    pub val_size: usize,
    /// Bracket-prediction training-set size.
    pub dataset: usize,
    /// Adam step size.  The desk profiles run cooler than the 1e-3
    /// default: at paper widths the walking GRU can drive training loss
    /// to zero by memorizing a step counter, and once that shortcut wins,
    /// accuracy beyond the training lengths falls off a cliff.
    pub lr: f64,
}

pub const QUICK: Profile = Profile {
    name: "quick",
    hidden: 32,
    embed_dim: 16,
    head_dim: 8,
    key_hidden: 16,
    out_hidden: 16,
    steps: 300,
    batch: 8,
    bits: 8,
    train_len: 6,
    n_eval: 100,
    val_every: 100,
    val_size: 50,
    dataset: 400,
    lr: 1e-3,
};

pub const SMOKE: Profile = Profile {
    name: "smoke",
    hidden: 128,
    embed_dim: 32,
    head_dim: 128,
    key_hidden: 64,
    out_hidden: 64,
    steps: 20_000,
    batch: 32,
    bits: 10,
    train_len: 10,
    n_eval: 1000,
    val_every: 500,
    val_size: 200,
    dataset: 5_000,
    lr: 3e-4,
};

pub const PAPER: Profile = Profile {
    name: "paper",
    hidden: 256,
    embed_dim: 32,
    head_dim: 256,
    key_hidden: 128,
    out_hidden: 128,
    steps: 50_000,
    batch: 32,
    bits: 10,
    train_len: 10,
    n_eval: 1000,
    val_every: 500,
    val_size: 200,
    dataset: 5_000,
    lr: 3e-4,
};

pub const PROFILES: [&Profile; 3] = [&QUICK, &SMOKE, &PAPER];

pub fn profile(name: &str) -> Result<&'static Profile, Failure> {
    PROFILES
        .iter()
        .find(|p| p.name == name)
        .copied()
        .ok_or_else(|| {
            usage(format!(
                "unknown profile '{name}' (expected one of quick, smoke, paper)"
            ))
        })
}

/// One run request before profile defaults are applied: what a `[run]`
/// manifest section or the inline flags carry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSpec {
    pub task: String,
    pub model: String,
    pub ha: Option<usize>,
    pub hc: Option<usize>,
    pub bits: Option<usize>,
    pub train_len: Option<usize>,
    pub steps: Option<usize>,
    pub hidden: Option<usize>,
    pub batch: Option<usize>,
    pub seeds: Vec<u64>,
}

pub fn parse_task(name: &str) -> Result<Flavor, Failure> {
    if let Some(rest) = name.strip_prefix("dyck") {
        let types: usize = rest
            .parse()
            .map_err(|_| usage(format!("bad bracket-type count in task '{name}'")))?;
        return Ok(Flavor::Dyck { types });
    }
    name.parse::<Task>()
        .map(Flavor::Algorithmic)
        .map_err(|e| usage(e.to_string()))
}

pub fn parse_model(name: &str) -> Result<ModelKind, Failure> {
    ModelKind::parse(name).ok_or_else(|| {
        usage(format!(
            "unknown model '{name}' (expected panm, lstm_s2s, or content_attention)"
        ))
    })
}

/// Expand one spec into per-seed configs.  The pointer model defaults to
/// two address heads and one content head; baselines have no heads, and a
/// head request on a baseline is rejected rather than silently dropped.
pub fn resolve(spec: &RunSpec, profile: &Profile) -> Result<Vec<RunConfig>, Failure> {
    let flavor = parse_task(&spec.task)?;
    let kind = parse_model(&spec.model)?;
    let (ha, hc) = match kind {
        ModelKind::Panm => (spec.ha.unwrap_or(2), spec.hc.unwrap_or(1)),
        _ => {
            if spec.ha.is_some_and(|h| h > 0) || spec.hc.is_some_and(|h| h > 0) {
                return Err(usage(format!(
                    "{} has no pointer heads; drop --Ha/--Hc",
                    kind.name()
                )));
            }
            (0, 0)
        }
    };
    if matches!(flavor, Flavor::Dyck { .. }) && kind == ModelKind::LstmS2s {
        return Err(usage(
            "bracket prediction has no seq2seq baseline; use panm or content_attention",
        ));
    }
    let hidden = spec.hidden.unwrap_or(profile.hidden);
    let model = ModelConfig {
        kind,
        flavor,
        embed_dim: profile.embed_dim,
        hidden,
        bits: spec.bits.unwrap_or(profile.bits),
        address_heads: ha,
        content_heads: hc,
        head_dim: profile.head_dim,
        key_hidden: profile.key_hidden,
        out_hidden: profile.out_hidden,
    };
    let train_len = spec.train_len.unwrap_or_else(|| match flavor {
        Flavor::Algorithmic(task) => task.snap_length(profile.train_len),
        Flavor::Dyck { .. } => profile.train_len,
    });
    let autoregressive = matches!(flavor, Flavor::Dyck { .. });
    let seeds: &[u64] = if spec.seeds.is_empty() { &[1] } else { &spec.seeds };
    let configs: Vec<RunConfig> = seeds
        .iter()
        .map(|&seed| RunConfig {
            model,
            train_len,
            steps: spec.steps.unwrap_or(profile.steps),
            batch: spec.batch.unwrap_or(profile.batch),
            adam: AdamConfig { lr: profile.lr, ..AdamConfig::default() },
            clip: 10.0,
            seed,
            autoregressive,
            dataset: if autoregressive { profile.dataset } else { 0 },
            eval_modes: EvalMode::ALL.to_vec(),
            n_eval: profile.n_eval,
            val_every: profile.val_every,
            val_size: profile.val_size,
            track_modes: vec![EvalMode::Double],
        })
        .collect();
    for cfg in &configs {
        cfg.validate().map_err(|e| usage(e.to_string()))?;
    }
    Ok(configs)
}
