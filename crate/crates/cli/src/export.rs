//! CSV export of traces with a fixed column contract.

use crate::trace::{read_trace, TraceRecord};
use std::io;
use std::path::Path;

pub const COLUMNS: [&str; 13] = ["epoch", "success", "H", "xi", "C", "IEI", "SEI", "TEI", "la", "lQ", "Lt", "wIEI", "wSEI"];

/// One CSV row; `None` is an empty cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub epoch: usize,
    pub values: [Option<f64>; 12],
}

impl From<&TraceRecord> for CsvRow {
    fn from(r: &TraceRecord) -> Self {
        Self {
            epoch: r.epoch,
            values: [
                Some(r.success),
                r.entropy,
                r.similarity,
                Some(r.comm_count as f64),
                r.iei,
                r.sei,
                r.tei,
                Some(r.l_a),
                Some(r.l_q),
                Some(r.l_t),
                Some(r.w_iei),
                Some(r.w_sei),
            ],
        }
    }
}

/// Writes `trace` as CSV to `out`. Malformed trace lines are skipped and
/// returned as `(line number, message)` so the caller can report them.
pub fn export_csv(trace: &Path, out: &Path) -> io::Result<Vec<(usize, String)>> {
    let parsed = read_trace(trace)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(COLUMNS)?;
    for r in &parsed.records {
        let row = CsvRow::from(r);
        let mut cells = vec![row.epoch.to_string()];
        cells.extend(row.values.iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(parsed.errors)
}

pub fn import_csv(path: &Path) -> io::Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(COLUMNS) {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unexpected header {header:?}")));
    }
    let bad = |line: usize, what: String| io::Error::new(io::ErrorKind::InvalidData, format!("line {line}: {what}"));
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let epoch = rec[0].parse().map_err(|e| bad(line, format!("epoch: {e}")))?;
        let mut values = [None; 12];
        for (k, cell) in rec.iter().skip(1).enumerate() {
            values[k] = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|e| bad(line, format!("{}: {e}", COLUMNS[k + 1])))?)
            };
        }
        rows.push(CsvRow { epoch, values });
    }
    Ok(rows)
}
