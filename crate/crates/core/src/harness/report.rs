//! CSV and text renderings of runs and experiments.
//!
//! CSV files carry no wall-clock fields, so reruns of the same config and
//! seed produce identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use super::eval::{accuracy_from_logs, read_logs};
use super::experiments::{ExperimentKind, ExperimentReport, RowOutcome};
use super::{HarnessError, RunReport};

pub const CSV_HEADER: &str =
    "rank,label,fusion_location,fusion_fn,feature_mask,slot_map,config_hash,status,best_val_accuracy,final_val_accuracy,best_step,final_train_loss";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn experiment_csv(report: &ExperimentReport) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in &report.rows {
        let tail = match &r.outcome {
            RowOutcome::Ok {
                best_val_accuracy,
                final_val_accuracy,
                best_step,
                final_train_loss,
            } => format!("ok,{best_val_accuracy},{final_val_accuracy},{best_step},{final_train_loss}"),
            RowOutcome::Failed { error } => format!("failed: {},,,,", csv_field(error)),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{tail}",
            r.rank,
            csv_field(&r.label),
            r.fusion_location.name(),
            r.fusion_fn.name(),
            csv_field(&r.feature_mask),
            csv_field(&r.slot_map),
            r.config_hash
        );
    }
    out
}

pub fn experiment_table(report: &ExperimentReport) -> String {
    let title = match report.kind {
        ExperimentKind::FusionGrid => "Fusion grid",
        ExperimentKind::Ablation => "Edge-feature ablation (values + add)",
    };
    let mut out = format!("{title}, {} updates, base config {}\n", report.max_updates, report.base_config_hash);
    let header = match report.kind {
        ExperimentKind::FusionGrid => ("location", "fn"),
        ExperimentKind::Ablation => ("features", ""),
    };
    let _ = writeln!(out, "{:>4}  {:<24} {:<16} {:<8} {:>9}  {:>8}", "rank", "row", header.0, header.1, "val acc", "hash");
    for r in &report.rows {
        let acc = r.accuracy().map_or_else(|| "FAILED".to_string(), |a| format!("{:.2}%", 100.0 * a));
        let (a, b) = match report.kind {
            ExperimentKind::FusionGrid => (r.fusion_location.name().to_string(), r.fusion_fn.name().to_string()),
            ExperimentKind::Ablation => (r.feature_mask.clone(), String::new()),
        };
        let _ = writeln!(out, "{:>4}  {:<24} {:<16} {:<8} {:>9}  {}", r.rank, r.label, a, b, acc, r.config_hash);
    }
    out
}

/// Writes `experiment.json`, `results.csv` and `results.txt` into `dir`.
pub fn write_experiment(dir: &Path, report: &ExperimentReport) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("experiment.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("results.csv"), experiment_csv(report))?;
    std::fs::write(dir.join("results.txt"), experiment_table(report))?;
    Ok(())
}

pub fn run_table(report: &RunReport) -> String {
    let mut out = format!(
        "config {}  source {}  params {}  edge tensors {}  wall {:.1}s\n",
        report.config_hash, report.source_revision, report.n_params, report.edge_tensors_allocated, report.wall_time_secs
    );
    let _ = writeln!(out, "{:>8}  {:>10}  {:>9}", "update", "train loss", "val acc");
    for e in &report.evals {
        let _ = writeln!(out, "{:>8}  {:>10.5}  {:>8.2}%", e.step, e.train_loss, 100.0 * e.val_accuracy);
    }
    let _ = writeln!(out, "best {:.2}% at update {}", 100.0 * report.best_val_accuracy, report.best_step);
    out
}

/// Renders whatever `dir` holds: a training run or an experiment. For a run
/// the best accuracy is re-derived from the logged decodes and must match.
pub fn render_dir(dir: &Path) -> Result<String, HarnessError> {
    let exp = dir.join("experiment.json");
    if exp.exists() {
        let report: ExperimentReport = serde_json::from_str(&std::fs::read_to_string(exp)?)?;
        return Ok(experiment_table(&report));
    }
    let report: RunReport = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?;
    let derived = accuracy_from_logs(&read_logs(&dir.join("val_decodes.jsonl"))?)?;
    if derived != report.best_val_accuracy {
        return Err(HarnessError::Config(format!(
            "logged decodes give {derived}, report says {}",
            report.best_val_accuracy
        )));
    }
    Ok(run_table(&report))
}
