//! Offline trace analysis: recomputing efficiency metrics, convergence
//! epochs, and the cross-run comparison grid.

use crate::trace::TraceRecord;
use mcomm_core::metrics::tei;
use std::fmt::Write;

/// Efficiency indices recomputed from a record's raw fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Recomputed {
    pub iei: Option<f64>,
    pub sei: Option<f64>,
    pub tei: Option<f64>,
}

pub fn recompute(r: &TraceRecord, floor: f64) -> Recomputed {
    let s = r.success.max(floor);
    Recomputed { iei: r.entropy.map(|h| h / s), sei: r.similarity.map(|x| x / s), tei: tei(r.success, r.comm_count) }
}

/// Largest absolute difference between stored and recomputed indices, or
/// `None` when a field is null on one side only.
pub fn discrepancy(r: &TraceRecord, floor: f64) -> Option<f64> {
    let c = recompute(r, floor);
    let mut worst: f64 = 0.0;
    for (stored, fresh) in [(r.iei, c.iei), (r.sei, c.sei), (r.tei, c.tei)] {
        match (stored, fresh) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => return None,
        }
    }
    Some(worst)
}

/// First index from which every value over the next `window` entries lies
/// within `tol` (relative) of the final value. A null entry breaks a window.
pub fn convergence_index(values: &[Option<f64>], tol: f64, window: usize) -> Option<usize> {
    let last = (*values.last()?)?;
    let band = tol * last.abs();
    let inside = |v: &Option<f64>| v.is_some_and(|v| (v - last).abs() <= band);
    let mut run = 0usize;
    for (i, v) in values.iter().enumerate() {
        run = if inside(v) { run + 1 } else { 0 };
        if run == window {
            return Some(i + 1 - window);
        }
    }
    None
}

/// Epoch at which `metric` settles within 5% of its final value for 50
/// consecutive epochs.
pub fn convergence_epoch(records: &[TraceRecord], metric: &str) -> Option<usize> {
    let values: Vec<Option<f64>> = records.iter().map(|r| r.metric(metric).flatten()).collect();
    convergence_index(&values, 0.05, 50).map(|i| records[i].epoch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub epochs: usize,
    pub success_final: Option<f64>,
    pub success_converged: Option<usize>,
    pub tei_final: Option<f64>,
    pub tei_converged: Option<usize>,
}

pub fn compare_row(label: &str, records: &[TraceRecord]) -> CompareRow {
    let last = records.last();
    CompareRow {
        label: label.to_string(),
        epochs: records.len(),
        success_final: last.map(|r| r.success),
        success_converged: convergence_epoch(records, "success"),
        tei_final: last.and_then(|r| r.tei),
        tei_converged: convergence_epoch(records, "tei"),
    }
}

fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Plain-text grid: one row per run, final values and convergence epochs
/// for success and TEI.
pub fn format_compare(rows: &[CompareRow]) -> String {
    let header = ["run", "epochs", "S final", "S conv. epoch", "TEI final", "TEI conv. epoch"];
    let body: Vec<[String; 6]> = rows
        .iter()
        .map(|r| {
            [
                r.label.clone(),
                r.epochs.to_string(),
                cell(r.success_final.map(|v| format!("{v:.4}"))),
                cell(r.success_converged),
                cell(r.tei_final.map(|v| format!("{v:.6}"))),
                cell(r.tei_converged),
            ]
        })
        .collect();
    let widths: Vec<usize> =
        (0..6).map(|k| body.iter().map(|r| r[k].len()).chain([header[k].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header, &mut out);
    line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    for r in &body {
        line(&r.iter().map(String::as_str).collect::<Vec<_>>(), &mut out);
    }
    out
}
