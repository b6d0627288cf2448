use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use rla_discovery::metrics::{
    ecdf_by_method_csv, parse_playout_log, revisit_curve_csv, success_table_csv, summary_csv, RunRecord,
};
use rla_discovery::search::{Mode, PlayoutRow};

use crate::discover::{PLAYOUT_LOG, REPORT_FILE, SUMMARY_FILE};

pub const ECDF_FILE: &str = "ecdf.csv";
pub const SUCCESS_FILE: &str = "success.csv";
pub const REVISIT_FILE: &str = "revisit.csv";
pub const NOTES_FILE: &str = "notes.txt";

/// What a report run read and skipped.
#[derive(Debug, Default)]
pub struct ReportOutcome {
    pub runs: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Run directories at or below `root`, in sorted order.
fn find_runs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.join(REPORT_FILE).is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.extension().is_none_or(|e| e != "partial"))
        .collect();
    children.sort();
    for c in children {
        find_runs(&c, out)?;
    }
    Ok(())
}

fn load_run(dir: &Path) -> Result<(RunRecord, Vec<PlayoutRow>), String> {
    let text = std::fs::read_to_string(dir.join(REPORT_FILE)).map_err(|e| format!("{REPORT_FILE}: {e}"))?;
    let record: RunRecord = serde_json::from_str(&text).map_err(|e| format!("{REPORT_FILE}: {e}"))?;
    let log = std::fs::read_to_string(dir.join(PLAYOUT_LOG)).map_err(|e| format!("{PLAYOUT_LOG}: {e}"))?;
    let rows = parse_playout_log(&log).map_err(|e| format!("{PLAYOUT_LOG}: {e}"))?;
    if rows.len() != record.report.cumulative_playouts {
        return Err(format!(
            "{PLAYOUT_LOG} has {} rows but the report spent {} playouts",
            rows.len(),
            record.report.cumulative_playouts
        ));
    }
    Ok((record, rows))
}

/// Reads every run under `inputs` and writes the aggregate CSVs to `out`.
/// Unreadable runs are skipped, logged and listed in the notes file.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<ReportOutcome> {
    let mut dirs = Vec::new();
    for i in inputs {
        find_runs(i, &mut dirs)?;
    }
    dirs.sort();
    dirs.dedup();
    let mut outcome = ReportOutcome::default();
    let mut records = Vec::new();
    let mut curves: Vec<(Mode, u64, Vec<PlayoutRow>)> = Vec::new();
    for d in dirs {
        match load_run(&d) {
            Ok((r, rows)) => {
                curves.push((r.method, r.seed, rows));
                records.push(r);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", d.display());
                outcome.skipped.push((d, e));
            }
        }
    }
    outcome.runs = records.len();
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(ECDF_FILE), ecdf_by_method_csv(&records))?;
    std::fs::write(out.join(SUCCESS_FILE), success_table_csv(&records))?;
    std::fs::write(out.join(REVISIT_FILE), revisit_curve_csv(&curves))?;
    std::fs::write(out.join(SUMMARY_FILE), summary_csv(&records))?;
    let mut notes = format!("runs read: {}\nruns skipped: {}\n", outcome.runs, outcome.skipped.len());
    for (d, e) in &outcome.skipped {
        notes.push_str(&format!("skipped {}: {e}\n", d.display()));
    }
    std::fs::write(out.join(NOTES_FILE), notes)?;
    Ok(outcome)
}
