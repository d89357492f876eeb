//! Report files. Every writer is a pure function of its inputs, so rerunning
//! a report over the same results reproduces the files byte for byte.
//!
//! | file | contents |
//! |---|---|
//! | `results.json` | the full [`ResultTable`] |
//! | `accuracy.csv` | `variant` then, per condition, one column per shot and an `Average` column |
//! | `cells.csv` | `variant,condition_rpm,shot,mean_accuracy,std_accuracy,tasks,failed` |
//! | `tasks.csv` | `variant,condition_rpm,shot,repeat,task,seed,pre_accuracy,accuracy,status` |
//! | `confusion/<variant>_<rpm>rpm_<shot>s.txt` | true class per row, predicted class per column |
//! | `summary.md` | markdown version of the table |
//! | `adaptation_reports.jsonl` | one JSON object per (variant, task) |
//! | `loss/<rpm>rpm_<network>_r<repeat>.csv` | `iteration,loss` |
//! | `sweep_topk.csv` | `k,variant,mean_accuracy,std_accuracy`; per-task files of the sweep go under `sweep/` |
//!
//! Accuracies are percentages written with the shortest exact representation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;
use twinproto_core::twinsim::HealthState;

use crate::error::{io, Error, Result};
use crate::harness::{CellResult, LossTrace, ResultTable, RunOutput, SweepOutput, SweepRow, TaskRecord};

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    fs::write(path, contents).map_err(io(path))
}

pub fn shot_column(condition_rpm: u32, shot: usize) -> String {
    format!("{condition_rpm}rpm_{shot}s")
}

pub fn average_column(condition_rpm: u32) -> String {
    format!("{condition_rpm}rpm_Average")
}

/// Mean over the shot columns of one (variant, condition) row, `None` if a cell is missing.
pub fn row_average(table: &ResultTable, variant: crate::harness::Variant, condition_rpm: u32) -> Option<f64> {
    let shots = table.shots();
    let vals: Option<Vec<f64>> = shots.iter().map(|&s| table.cell(variant, condition_rpm, s).map(|c| c.mean_accuracy)).collect();
    vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn accuracy_csv(table: &ResultTable) -> String {
    let (conditions, shots) = (table.conditions(), table.shots());
    let mut out = String::from("variant");
    for &c in &conditions {
        for &s in &shots {
            out.push(',');
            out.push_str(&shot_column(c, s));
        }
        out.push(',');
        out.push_str(&average_column(c));
    }
    out.push('\n');
    for v in table.variants() {
        out.push_str(v.name());
        for &c in &conditions {
            for &s in &shots {
                out.push(',');
                if let Some(cell) = table.cell(v, c, s) {
                    let _ = write!(out, "{}", cell.mean_accuracy);
                }
            }
            out.push(',');
            if let Some(a) = row_average(table, v, c) {
                let _ = write!(out, "{a}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn cells_csv(table: &ResultTable) -> String {
    let mut out = String::from("variant,condition_rpm,shot,mean_accuracy,std_accuracy,tasks,failed\n");
    for c in &table.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.variant, c.condition_rpm, c.shot, c.mean_accuracy, c.std_accuracy, c.total_tasks, c.failed_tasks
        );
    }
    out
}

pub fn confusion_grid(cell: &CellResult) -> String {
    let names: Vec<&str> = HealthState::ALL.iter().map(|h| h.name()).collect();
    let width = cell.confusion.iter().flatten().map(|v| v.to_string().len()).max().unwrap_or(1).max(4);
    let mut out = format!(
        "# {} at {} rpm, {}-shot: rows are true classes, columns predicted\n",
        cell.variant, cell.condition_rpm, cell.shot
    );
    let _ = write!(out, "{:>5}", "");
    for n in &names {
        let _ = write!(out, " {n:>width$}");
    }
    out.push('\n');
    for (i, row) in cell.confusion.iter().enumerate() {
        let _ = write!(out, "{:>5}", names[i]);
        for v in row {
            let _ = write!(out, " {v:>width$}");
        }
        out.push('\n');
    }
    out
}

pub fn confusion_file_name(cell: &CellResult) -> String {
    format!("{}_{}rpm_{}s.txt", cell.variant, cell.condition_rpm, cell.shot)
}

pub fn summary_md(table: &ResultTable) -> String {
    let (conditions, shots) = (table.conditions(), table.shots());
    let mut out = String::from("# Accuracy by scenario (%)\n\nMean over repeats, sample standard deviation in parentheses.\n");
    for &c in &conditions {
        let _ = write!(out, "\n## {c} rpm\n\n| variant |");
        for &s in &shots {
            let _ = write!(out, " {s}s |");
        }
        out.push_str(" Average |\n|---|");
        for _ in 0..=shots.len() {
            out.push_str("---|");
        }
        out.push('\n');
        for v in table.variants() {
            let _ = write!(out, "| {v} |");
            for &s in &shots {
                match table.cell(v, c, s) {
                    Some(cell) => {
                        let _ = write!(out, " {:.2} ({:.2}) |", cell.mean_accuracy, cell.std_accuracy);
                    }
                    None => out.push_str(" |"),
                }
            }
            match row_average(table, v, c) {
                Some(a) => {
                    let _ = writeln!(out, " {a:.2} |");
                }
                None => out.push_str(" |\n"),
            }
        }
    }
    let failed: usize = table.cells.iter().map(|c| c.failed_tasks).sum();
    let total: usize = table.cells.iter().map(|c| c.total_tasks).sum();
    let _ = writeln!(out, "\n{failed} of {total} tasks failed.");
    out
}

pub fn tasks_csv(records: &[TaskRecord]) -> String {
    let mut out = String::from("variant,condition_rpm,shot,repeat,task,seed,pre_accuracy,accuracy,status\n");
    for r in records {
        let (pre, post, status) = match &r.outcome {
            Ok(rep) => (
                format!("{}", 100.0 * rep.pre_accuracy),
                format!("{}", 100.0 * rep.post_accuracy),
                if rep.fallback.is_some() { "fallback" } else { "ok" },
            ),
            Err(_) => (String::new(), String::new(), "failed"),
        };
        let _ = writeln!(out, "{},{},{},{},{},{},{pre},{post},{status}", r.variant, r.condition_rpm, r.shot, r.repeat, r.task, r.seed);
    }
    out
}

/// One JSON object per line describing the adaptation of one task.
pub fn adaptation_jsonl(records: &[TaskRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let mut obj = json!({
            "variant": r.variant,
            "condition_rpm": r.condition_rpm,
            "shot": r.shot,
            "repeat": r.repeat,
            "task": r.task,
            "seed": r.seed,
        });
        let m = obj.as_object_mut().expect("object literal");
        match &r.outcome {
            Ok(rep) => {
                let protos: Vec<&[f64]> = (0..rep.target_protos.shape()[0]).map(|i| rep.target_protos.row(i)).collect();
                let epochs: Vec<_> = rep
                    .epochs
                    .iter()
                    .map(|e| json!({"anc1": e.anc1, "ent1": e.ent1, "anc2": e.anc2, "ent2": e.ent2, "total": e.total()}))
                    .collect();
                m.insert("query_labels".into(), json!(rep.query_labels));
                m.insert("pre_predictions".into(), json!(rep.pre_predictions));
                m.insert("post_predictions".into(), json!(rep.post_predictions));
                m.insert("pre_accuracy".into(), json!(rep.pre_accuracy));
                m.insert("post_accuracy".into(), json!(rep.post_accuracy));
                m.insert("epochs".into(), json!(epochs));
                m.insert("target_prototypes".into(), json!(protos));
                m.insert("fallback".into(), json!(rep.fallback));
                m.insert("error".into(), serde_json::Value::Null);
            }
            Err(e) => {
                m.insert("error".into(), json!(e));
            }
        }
        out.push_str(&serde_json::to_string(&obj).expect("json value serializes"));
        out.push('\n');
    }
    out
}

pub fn loss_csv(trace: &LossTrace) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in trace.losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    out
}

pub fn loss_file_name(trace: &LossTrace) -> String {
    format!("{}rpm_{}_r{}.csv", trace.condition_rpm, trace.network, trace.repeat)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,variant,mean_accuracy,std_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.k, r.variant, r.mean_accuracy, r.std_accuracy);
    }
    out
}

/// Table-derived files: `results.json`, `accuracy.csv`, `cells.csv`,
/// confusion grids and `summary.md`.
pub fn write_table(out_dir: &Path, table: &ResultTable) -> Result<()> {
    if table.cells.is_empty() {
        return Err(Error::Config("no results to report".into()));
    }
    let json = serde_json::to_string_pretty(table).expect("table serializes");
    write_file(&out_dir.join("results.json"), &(json + "\n"))?;
    write_file(&out_dir.join("accuracy.csv"), &accuracy_csv(table))?;
    write_file(&out_dir.join("cells.csv"), &cells_csv(table))?;
    for cell in &table.cells {
        write_file(&out_dir.join("confusion").join(confusion_file_name(cell)), &confusion_grid(cell))?;
    }
    write_file(&out_dir.join("summary.md"), &summary_md(table))
}

pub fn write_records(out_dir: &Path, records: &[TaskRecord], traces: &[LossTrace]) -> Result<()> {
    write_file(&out_dir.join("tasks.csv"), &tasks_csv(records))?;
    write_file(&out_dir.join("adaptation_reports.jsonl"), &adaptation_jsonl(records))?;
    for t in traces {
        write_file(&out_dir.join("loss").join(loss_file_name(t)), &loss_csv(t))?;
    }
    Ok(())
}

pub fn write_run(out_dir: &Path, run: &RunOutput) -> Result<()> {
    write_table(out_dir, &run.table)?;
    write_records(out_dir, &run.records, &run.traces)
}

pub fn write_sweep(out_dir: &Path, sweep: &SweepOutput) -> Result<()> {
    write_file(&out_dir.join("sweep_topk.csv"), &sweep_csv(&sweep.rows))?;
    let json = serde_json::to_string_pretty(&sweep.rows).expect("rows serialize");
    write_file(&out_dir.join("sweep_topk.json"), &(json + "\n"))?;
    write_records(&out_dir.join("sweep"), &sweep.records, &sweep.traces)
}

pub fn read_table(path: &Path) -> Result<ResultTable> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_file(path, contents)
}
