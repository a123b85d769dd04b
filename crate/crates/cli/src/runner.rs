//! Run execution: a small worker pool over independent configs, one
//! structured-text record per run, and an aggregate table refreshed from
//! the whole results directory after every invocation.
//!
//! The results directory is append-only.  A config whose record already
//! exists is not re-run — its record is parsed and reported instead, which
//! makes long campaigns resumable and repeated invocations idempotent.
//! Writes go through a temp file and rename, so a record is either absent
//! or complete, never half-written.

use std::collections::VecDeque;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use panm_core::harness::{
    aggregate_csv, summary_csv, train_run, RunConfig, RunRecord, TrainEvent,
};

use crate::{run_failure, Failure};

pub struct PlanOutcome {
    pub records: Vec<RunRecord>,
    pub executed: usize,
    pub reused: usize,
}

pub fn runs_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("runs")
}

fn record_path(out_dir: &Path, run_id: &str) -> PathBuf {
    runs_dir(out_dir).join(format!("{run_id}.record"))
}

/// Write `text` at `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, text: &str) -> Result<(), Failure> {
    let dir = path.parent().ok_or_else(|| run_failure("write path has no parent"))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| run_failure("write path has no file name"))?;
    let tmp = dir.join(format!(".{name}.tmp"));
    let fail = |e: std::io::Error| run_failure(format!("writing {}: {e}", path.display()));
    let mut file = fs::File::create(&tmp).map_err(fail)?;
    file.write_all(text.as_bytes()).map_err(fail)?;
    file.sync_all().map_err(fail)?;
    drop(file);
    fs::rename(&tmp, path).map_err(fail)?;
    Ok(())
}

fn execute_one(
    cfg: &RunConfig,
    out_dir: &Path,
    manifest_hash: &str,
    save_ckpt: bool,
    quiet: bool,
) -> Result<RunRecord, Failure> {
    let run_id = cfg.run_id();
    let ckpt_path = save_ckpt.then(|| out_dir.join("ckpt").join(format!("{run_id}.ckpt")));
    let print_every = (cfg.steps / 20).max(1);
    let mut progress = |event: &TrainEvent| {
        if quiet {
            return;
        }
        match event {
            TrainEvent::Step { step, steps, loss } => {
                if step % print_every == 0 {
                    println!("[{run_id}] step {step}/{steps} loss {loss:.4}");
                }
            }
            TrainEvent::Validation { step, mode, token_acc } => {
                println!("[{run_id}] step {step} val {mode} token acc {token_acc:.2}");
            }
            TrainEvent::Evaluated { outcome } => {
                println!(
                    "[{run_id}] eval {} (len {}): token {:.2} seq {:.2}",
                    outcome.mode, outcome.len, outcome.token_acc, outcome.seq_acc
                );
            }
        }
    };
    let mut record = train_run(cfg, ckpt_path.as_deref(), &mut progress)
        .map_err(|e| run_failure(format!("run {run_id}: {e}")))?;
    record.manifest_hash = manifest_hash.to_string();
    atomic_write(&record_path(out_dir, &run_id), &record.render())?;
    Ok(record)
}

/// Execute every config not already on disk, `jobs` at a time.
pub fn execute_plan(
    configs: &[RunConfig],
    out_dir: &Path,
    manifest_hash: &str,
    jobs: usize,
    save_ckpt: bool,
    quiet: bool,
) -> Result<PlanOutcome, Failure> {
    let mkdir = |p: &Path| {
        fs::create_dir_all(p).map_err(|e| run_failure(format!("creating {}: {e}", p.display())))
    };
    mkdir(&runs_dir(out_dir))?;
    if save_ckpt {
        mkdir(&out_dir.join("ckpt"))?;
    }

    let mut reused = Vec::new();
    let mut pending = VecDeque::new();
    for cfg in configs {
        let path = record_path(out_dir, &cfg.run_id());
        if path.exists() {
            let text = fs::read_to_string(&path)
                .map_err(|e| run_failure(format!("reading {}: {e}", path.display())))?;
            let record = RunRecord::parse(&text)
                .map_err(|e| run_failure(format!("parsing {}: {e}", path.display())))?;
            if !quiet {
                println!("[{}] record exists, skipping", record.run_id);
            }
            reused.push(record);
        } else {
            pending.push_back(cfg.clone());
        }
    }

    let executed_count = pending.len();
    let queue = Mutex::new(pending);
    let done: Mutex<Vec<Result<RunRecord, Failure>>> = Mutex::new(Vec::new());
    let workers = jobs.max(1).min(executed_count.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(cfg) = queue.lock().expect("queue lock").pop_front() else {
                    return;
                };
                let result = execute_one(&cfg, out_dir, manifest_hash, save_ckpt, quiet);
                done.lock().expect("results lock").push(result);
            });
        }
    });

    let mut records = reused;
    for result in done.into_inner().expect("results lock") {
        records.push(result?);
    }
    records.sort_by(|a, b| a.run_id.cmp(&b.run_id));

    refresh_aggregate(out_dir)?;
    Ok(PlanOutcome {
        records,
        executed: executed_count,
        reused: configs.len() - executed_count,
    })
}

/// Every record in a results directory, sorted by run id.
pub fn load_records(out_dir: &Path) -> Result<Vec<RunRecord>, Failure> {
    let dir = runs_dir(out_dir);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| run_failure(format!("reading {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "record"))
        .collect();
    paths.sort();
    let mut records = Vec::with_capacity(paths.len());
    for path in paths {
        let text = fs::read_to_string(&path)
            .map_err(|e| run_failure(format!("reading {}: {e}", path.display())))?;
        let record = RunRecord::parse(&text)
            .map_err(|e| run_failure(format!("parsing {}: {e}", path.display())))?;
        records.push(record);
    }
    records.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(records)
}

/// Regenerate `aggregate.csv` from everything on disk.
pub fn refresh_aggregate(out_dir: &Path) -> Result<(), Failure> {
    let records = load_records(out_dir)?;
    atomic_write(&out_dir.join("aggregate.csv"), &aggregate_csv(&records))
}

/// Render a CSV as an aligned text table for terminal summaries.
pub fn format_table(csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut widths = vec![0usize; first.len()];
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            if i < widths.len() {
                widths[i] = widths[i].max(cell.len());
            }
        }
    }
    let mut out = String::new();
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            if i + 1 < row.len() && i < widths.len() {
                for _ in cell.len()..widths[i] {
                    out.push(' ');
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Post-plan terminal summary: per-mode mean ± std over this plan's runs.
pub fn print_summary(records: &[RunRecord]) {
    if records.is_empty() {
        return;
    }
    println!();
    print!("{}", format_table(&summary_csv(records)));
}
