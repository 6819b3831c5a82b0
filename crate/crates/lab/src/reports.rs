//! CSV report writers. Formatting is deterministic: the same values
//! always produce the same bytes, and nothing time- or path-dependent
//! goes into a report.

use crate::trainer::{EvalRecord, RunReport, StepRecord};
use std::io::{self, Write};
use std::path::Path;

/// Shortest round-trip decimal form; stable across runs and platforms
/// for equal bit patterns.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

/// Writes one table. Cells must not contain commas or newlines; reports
/// are numeric and there is no quoting layer to hide mistakes in.
pub fn write_csv(
    path: &Path,
    header: &[&str],
    rows: &[Vec<String>],
) -> io::Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "ragged csv row");
        for cell in row {
            assert!(
                !cell.contains(',') && !cell.contains('\n'),
                "csv cell needs quoting: {cell:?}"
            );
        }
        writeln!(out, "{}", row.join(","))?;
    }
    std::fs::write(path, out)
}

pub const RUN_REPORT_HEADER: [&str; 7] =
    ["step", "ce", "lb", "z", "total", "drop_fraction", "max_abs_router_logit"];

pub fn step_row(r: &StepRecord) -> Vec<String> {
    vec![
        r.step.to_string(),
        fmt_f64(r.ce),
        fmt_f64(r.lb),
        fmt_f64(r.z),
        fmt_f64(r.total),
        fmt_f64(r.drop_fraction),
        fmt_f64(r.max_abs_router_logit),
    ]
}

pub fn write_run_report(path: &Path, report: &RunReport) -> io::Result<()> {
    let rows: Vec<Vec<String>> = report.steps.iter().map(step_row).collect();
    write_csv(path, &RUN_REPORT_HEADER, &rows)
}

pub const EVAL_HEADER: [&str; 4] = ["step", "train_acc", "heldout_acc", "drop_fraction"];

pub fn eval_row(e: &EvalRecord) -> Vec<String> {
    vec![
        e.step.to_string(),
        fmt_f64(e.train_acc),
        fmt_f64(e.heldout_acc),
        fmt_f64(e.drop_fraction),
    ]
}

pub fn write_eval_report(path: &Path, evals: &[EvalRecord]) -> io::Result<()> {
    let rows: Vec<Vec<String>> = evals.iter().map(eval_row).collect();
    write_csv(path, &EVAL_HEADER, &rows)
}
