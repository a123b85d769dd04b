//! Report generation: aggregate tables, accuracy-versus-length charts, and
//! head-ablation panels, each chart paired with a sidecar CSV that carries
//! the run ids behind every plotted number.
//!
//! Everything here is a pure function of the records on disk — reading the
//! same directory twice produces byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use panm_core::harness::{aggregate_csv, summary_csv, EvalMode, RunRecord};

use crate::runner::{atomic_write, format_table, load_records};
use crate::svg::{line_chart, Series};
use crate::{run_failure, Failure};

/// Group key for one plotted line: variant and head counts.
type LineKey = (String, usize, usize);

fn line_label(key: &LineKey) -> String {
    let (variant, ha, hc) = key;
    if variant == "panm" {
        format!("{variant} Ha={ha} Hc={hc}")
    } else {
        variant.clone()
    }
}

fn group_by_task(records: &[RunRecord]) -> BTreeMap<String, Vec<&RunRecord>> {
    let mut tasks: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for record in records {
        tasks.entry(record.config.task_label()).or_default().push(record);
    }
    tasks
}

fn line_key(record: &RunRecord) -> LineKey {
    (
        record.config.model.kind.name().to_string(),
        record.config.model.address_heads,
        record.config.model.content_heads,
    )
}

/// Accuracy-vs-length chart and sidecar for one task's records.
fn accuracy_by_length(task: &str, records: &[&RunRecord]) -> (String, String) {
    // line -> len -> (accs, run ids); BTreeMaps keep output order stable.
    let mut lines: BTreeMap<LineKey, BTreeMap<usize, (String, Vec<f64>, Vec<String>)>> =
        BTreeMap::new();
    for record in records {
        let per_len = lines.entry(line_key(record)).or_default();
        for e in &record.evals {
            let cell = per_len
                .entry(e.len)
                .or_insert_with(|| (e.mode.clone(), Vec::new(), Vec::new()));
            cell.1.push(e.token_acc);
            cell.2.push(record.run_id.clone());
        }
    }
    let mut csv =
        String::from("task,variant,H_a,H_c,mode,len,seeds,token_mean,token_std,records\n");
    let mut series = Vec::new();
    for (key, per_len) in &lines {
        let mut points = Vec::new();
        let mut errs = Vec::new();
        for (len, (mode, accs, ids)) in per_len {
            let (mean, std) = mean_std(accs);
            let mut ids = ids.clone();
            ids.sort();
            csv.push_str(&format!(
                "{task},{},{},{},{mode},{len},{},{mean:.4},{std:.4},{}\n",
                key.0,
                key.1,
                key.2,
                accs.len(),
                ids.join(";")
            ));
            points.push((*len as f64, mean));
            errs.push(std);
        }
        series.push(Series { label: line_label(key), points, err: errs });
    }
    let chart = line_chart(
        &format!("{task}: token accuracy vs test length"),
        "test length",
        "token accuracy (%)",
        &series,
        Some((0.0, 100.0)),
    );
    (chart, csv)
}

/// Ablation panel: doubled-length validation accuracy over training steps,
/// one line per head configuration (mean over seeds).
fn ablation_panel(task: &str, records: &[&RunRecord]) -> Option<(String, String)> {
    let mut lines: BTreeMap<LineKey, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut csv = String::from("task,variant,H_a,H_c,seed,step,token_acc,record\n");
    let mut any = false;
    for record in records {
        let label = EvalMode::Double.label(record.config.model.flavor);
        for (mode, points) in &record.val_curves {
            if mode != label {
                continue;
            }
            any = true;
            let per_step = lines.entry(line_key(record)).or_default();
            for (step, acc) in points {
                per_step.entry(*step).or_default().push(*acc);
                csv.push_str(&format!(
                    "{task},{},{},{},{},{step},{acc:.4},{}\n",
                    record.config.model.kind.name(),
                    record.config.model.address_heads,
                    record.config.model.content_heads,
                    record.config.seed,
                    record.run_id
                ));
            }
        }
    }
    if !any {
        return None;
    }
    let series: Vec<Series> = lines
        .iter()
        .map(|(key, per_step)| Series {
            label: line_label(key),
            points: per_step
                .iter()
                .map(|(step, accs)| (*step as f64, mean_std(accs).0))
                .collect(),
            err: Vec::new(),
        })
        .collect();
    let chart = line_chart(
        &format!("{task}: doubled-length accuracy vs training step"),
        "training step",
        "token accuracy (%)",
        &series,
        Some((0.0, 100.0)),
    );
    Some((chart, csv))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Generate every report file; returns the paths written.
pub fn cmd_report(results_dir: &Path, out_override: Option<&Path>) -> Result<Vec<PathBuf>, Failure> {
    let records = load_records(results_dir)?;
    if records.is_empty() {
        return Err(run_failure(format!(
            "no run records under {} — nothing to report",
            results_dir.display()
        )));
    }
    let report_dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| results_dir.join("report"));
    fs::create_dir_all(&report_dir)
        .map_err(|e| run_failure(format!("creating {}: {e}", report_dir.display())))?;

    let mut written = Vec::new();
    let mut emit = |name: &str, text: &str| -> Result<(), Failure> {
        let path = report_dir.join(name);
        atomic_write(&path, text)?;
        written.push(path);
        Ok(())
    };

    emit("summary.csv", &summary_csv(&records))?;
    emit("aggregate.csv", &aggregate_csv(&records))?;
    for (task, task_records) in group_by_task(&records) {
        let (chart, sidecar) = accuracy_by_length(&task, &task_records);
        emit(&format!("acc_len_{task}.svg"), &chart)?;
        emit(&format!("acc_len_{task}.csv"), &sidecar)?;
        if let Some((chart, sidecar)) = ablation_panel(&task, &task_records) {
            emit(&format!("ablation_{task}.svg"), &chart)?;
            emit(&format!("ablation_{task}.csv"), &sidecar)?;
        }
    }

    print!("{}", format_table(&summary_csv(&records)));
    println!();
    for path in &written {
        println!("wrote {}", path.display());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_basics() {
        let (m, s) = mean_std(&[4.0]);
        assert_eq!((m, s), (4.0, 0.0));
        let (m, s) = mean_std(&[2.0, 4.0]);
        assert_eq!(m, 3.0);
        assert!((s - 1.0).abs() < 1e-12);
    }
}
