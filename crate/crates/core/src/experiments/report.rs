use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pruning::PruneReport;
use crate::training::TrainHistory;

use super::SweepResult;

pub const SWEEP_HEADER: [&str; 4] = ["alpha", "compression_ratio", "accuracy_before_finetune", "accuracy_after_finetune"];

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    // Writing to a Vec cannot fail.
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv of ascii fields")
}

/// RFC 4180 CSV with one row per sweep point.
pub fn sweep_csv(result: &SweepResult) -> String {
    csv_text(
        &SWEEP_HEADER,
        result.rows.iter().map(|r| {
            vec![
                r.alpha.to_string(),
                r.compression_ratio.to_string(),
                r.accuracy_before_finetune.to_string(),
                r.accuracy_after_finetune.to_string(),
            ]
        }),
    )
}

pub fn history_csv(history: &TrainHistory) -> String {
    csv_text(
        &["epoch", "loss", "penalty", "accuracy"],
        history.epochs.iter().map(|e| vec![e.epoch.to_string(), e.loss.to_string(), e.penalty.to_string(), e.accuracy.to_string()]),
    )
}

/// Fixed-width per-layer table followed by the parameter totals.
pub fn prune_table(report: &PruneReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>5}  {:>8}  {:>7}  {:>14}  {:>14}  {:>7}", "layer", "m_before", "m_after", "eta_max", "tau", "removed");
    for d in &report.decisions {
        let _ = writeln!(
            out,
            "{:>5}  {:>8}  {:>7}  {:>14.6e}  {:>14.6e}  {:>7}",
            d.layer_index,
            d.rows_before(),
            d.kept_rows.len(),
            d.eta_max,
            d.tau,
            d.removed_rows.len()
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "original parameters: {}", report.original_param_count);
    let _ = writeln!(out, "reduced parameters:  {}", report.reduced_param_count);
    let _ = writeln!(out, "compression ratio:   {}", report.compression_ratio);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub sweep_csv: PathBuf,
    pub prune_table: PathBuf,
}

/// Writes `sweep.csv` and `prune_report.txt` into `dir`.
pub fn report(result: &SweepResult, prune: &PruneReport, dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles { sweep_csv: dir.join("sweep.csv"), prune_table: dir.join("prune_report.txt") };
    write_text(&files.sweep_csv, &sweep_csv(result))?;
    write_text(&files.prune_table, &prune_table(prune))?;
    Ok(files)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
