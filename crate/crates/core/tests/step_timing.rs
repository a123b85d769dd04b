//! Manual timing probes for sizing training profiles.
//!
//! These are ignored by default — they measure, they don't assert.  Run
//! with `cargo test --release --test step_timing -- --ignored --nocapture`
//! to get seconds-per-step at the profiles the result runs use, before
//! committing to a step budget.

use std::time::Instant;

use panm_core::autodiff::AdamConfig;
use panm_core::harness::{evaluate, stream_rng, streams, train_run, EvalMode, RunConfig};
use panm_core::model::{init_model_params, Flavor, ModelConfig, ModelKind};
use panm_core::tasks::Task;
use panm_core::RealParams;

fn paper_copy(kind: ModelKind, batch: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            kind,
            flavor: Flavor::Algorithmic(Task::Copy),
            embed_dim: 32,
            hidden: 256,
            bits: 10,
            address_heads: 2,
            content_heads: 1,
            head_dim: 12,
            key_hidden: 64,
            out_hidden: 128,
        },
        train_len: 10,
        steps: 12,
        batch,
        adam: AdamConfig::default(),
        clip: 10.0,
        seed: 1,
        autoregressive: false,
        dataset: 0,
        eval_modes: vec![],
        n_eval: 64,
        val_every: 1_000_000,
        val_size: 8,
        track_modes: vec![],
    }
}

fn desk_task(task: Task, kind: ModelKind, h_a: usize, h_c: usize) -> RunConfig {
    let mut cfg = paper_copy(kind, 32);
    cfg.model.flavor = Flavor::Algorithmic(task);
    cfg.model.hidden = 128;
    cfg.model.address_heads = h_a;
    cfg.model.content_heads = h_c;
    cfg.model.out_hidden = 64;
    cfg.train_len = task.snap_length(10);
    cfg
}

fn time_steps(tag: &str, cfg: &RunConfig) {
    let start = Instant::now();
    let record = train_run(cfg, None, &mut |_| {}).unwrap();
    let total = start.elapsed().as_secs_f64();
    let per_step = total / cfg.steps as f64;
    println!(
        "{tag}: {:.3} s/step ({} steps incl. {} validations in {total:.1}s) -> 20K steps ~ {:.1} h",
        per_step,
        cfg.steps,
        record.val_curves[0].1.len(),
        per_step * 20_000.0 / 3600.0
    );
}

#[test]
#[ignore = "manual timing probe"]
fn paper_scale_copy_steps() {
    for batch in [16, 32] {
        time_steps(&format!("copy panm h256 b{batch}"), &paper_copy(ModelKind::Panm, batch));
        time_steps(
            &format!("copy lstm h256 b{batch}"),
            &paper_copy(ModelKind::LstmS2s, batch),
        );
    }
}

#[test]
#[ignore = "manual timing probe"]
fn desk_scale_steps() {
    time_steps("reverse panm h128 ha2", &desk_task(Task::Reverse, ModelKind::Panm, 2, 0));
    time_steps("idsort panm h128 hc1", &desk_task(Task::IdSort, ModelKind::Panm, 2, 1));
}

#[test]
#[ignore = "manual learning probe"]
fn copy_learning_pilot() {
    // Go/no-go before the long result runs: desk-scale Copy should pull
    // well clear of the ~10% chance floor within a few thousand steps.
    let mut cfg = paper_copy(ModelKind::Panm, 32);
    cfg.model.hidden = 128;
    cfg.model.out_hidden = 64;
    cfg.steps = 3000;
    cfg.val_every = 250;
    cfg.val_size = 200;
    cfg.eval_modes = vec![EvalMode::NextLength, EvalMode::Double];
    cfg.n_eval = 200;
    let record = train_run(&cfg, None, &mut |e| {
        if let panm_core::harness::TrainEvent::Validation { step, mode, token_acc } = e {
            println!("pilot step {step}: {mode} token acc {token_acc:.1}");
        }
    })
    .unwrap();
    for e in &record.evals {
        println!("pilot final {}: token {:.1} seq {:.1}", e.mode, e.token_acc, e.seq_acc);
    }
}

#[test]
#[ignore = "manual timing probe"]
fn evaluation_cost_at_longest_mode() {
    let cfg = paper_copy(ModelKind::Panm, 32);
    let mut params = RealParams::new();
    let mut rng = stream_rng(1, streams::INIT);
    init_model_params(&mut params, &cfg.model, &mut rng).unwrap();
    let mut eval_rng = stream_rng(1, streams::EVAL);
    for (label, len, n) in [("L+1", 11usize, 200usize), ("8(L+1)", 88, 200)] {
        let start = Instant::now();
        evaluate(&params, &cfg.model, len, len, n, &mut eval_rng).unwrap();
        let dt = start.elapsed().as_secs_f64();
        println!("eval {label} n={n}: {dt:.2}s -> n=1000 ~ {:.0}s", dt * 1000.0 / n as f64);
    }
}
