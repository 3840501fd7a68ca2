//! Run collation: one row per evaluated run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EvalReport, REPORT_COLUMNS};
use crate::trainer::{SweepRow, SWEEP_COLUMNS};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_MD: &str = "summary.md";
pub const SWEEP_MD: &str = "lambda_sweep.md";

/// Everything `eval` knows about one scored checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub step: usize,
    pub freeze_plan: String,
    pub lambda: f64,
    pub beam: usize,
    pub images: usize,
    pub metrics: EvalReport,
    pub size_buckets: String,
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}

/// GitHub-style pipe table.
pub fn markdown_table<S: AsRef<str>>(header: &[S], rows: &[Vec<String>]) -> String {
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::from("|");
        for c in cells {
            s.push(' ');
            s.push_str(c);
            s.push_str(" |");
        }
        s.push('\n');
        s
    };
    let mut out = line(&mut header.iter().map(|h| h.as_ref()));
    out.push_str(&line(&mut header.iter().map(|_| "---")));
    for r in rows {
        out.push_str(&line(&mut r.iter().map(|c| c.as_str())));
    }
    out
}

/// `report.json` of every immediate subdirectory, in name order.
pub fn collect_runs(runs_dir: &Path) -> Result<Vec<(String, RunReport)>> {
    let entries = fs::read_dir(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(runs_dir, e))?.path();
        if path.join(REPORT_JSON).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    dirs.into_iter()
        .map(|dir| {
            let file = dir.join(REPORT_JSON);
            let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, serde_json::from_str(&text)?))
        })
        .collect()
}

/// Writes `summary.csv` and `summary.md` (one row per run, with the freeze
/// plan and λ each run was trained under) and returns the markdown.
pub fn write_summary(runs: &[(String, RunReport)], out_dir: &Path) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::config(format!(
            "no evaluated runs (subdirectories with {REPORT_JSON}) under {}",
            out_dir.display()
        )));
    }
    let mut header: Vec<&str> = vec!["run", "freeze_plan", "lambda"];
    header.extend(REPORT_COLUMNS);

    let csv_path = out_dir.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(&header)?;
    let mut md_rows = Vec::new();
    for (name, run) in runs {
        let lead = [name.clone(), run.freeze_plan.clone(), run.lambda.to_string()];
        let mut csv_row = lead.to_vec();
        csv_row.extend(run.metrics.values().iter().map(|v| format!("{v:.6}")));
        w.write_record(&csv_row)?;
        let mut md_row = lead.to_vec();
        md_row.extend(run.metrics.values().iter().map(|&v| fmt_metric(v)));
        md_rows.push(md_row);
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let mut md = markdown_table(&header, &md_rows);
    if let Some((_, first)) = runs.first() {
        md.push('\n');
        md.push_str(&first.size_buckets);
        md.push('\n');
    }
    let md_path = out_dir.join(SUMMARY_MD);
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    Ok(md)
}

/// Markdown rendering of a λ sweep, with the trailing mean detection loss.
pub fn sweep_markdown(rows: &[SweepRow]) -> String {
    let mut header: Vec<&str> = SWEEP_COLUMNS.to_vec();
    header.push("final L^O");
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.lambda.to_string()];
            match (&r.report, &r.error) {
                (Some(rep), _) => row.extend(rep.values()[..SWEEP_COLUMNS.len() - 1].iter().map(|&v| fmt_metric(v))),
                (None, err) => {
                    row.push(format!("failed: {}", err.as_deref().unwrap_or("unknown error")));
                    row.extend(std::iter::repeat_n("-".to_string(), SWEEP_COLUMNS.len() - 2));
                }
            }
            row.push(r.final_detection_loss.map_or_else(|| "-".into(), fmt_metric));
            row
        })
        .collect();
    markdown_table(&header, &body)
}
