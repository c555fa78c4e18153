//! JSON-lines training trace: one [`TraceRecord`] per epoch.

use mcomm_core::gradcore::Matrix;
use mcomm_core::training::EpochReport;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub success: f64,
    pub entropy: Option<f64>,
    pub similarity: Option<f64>,
    pub comm_count: usize,
    pub iei: Option<f64>,
    pub sei: Option<f64>,
    pub tei: Option<f64>,
    pub l_a: f64,
    pub l_q: f64,
    pub l_t: f64,
    pub w_iei: f64,
    pub w_sei: f64,
    /// Loss actually minimized (base, efficiency terms and any entropy bonus).
    pub l_total: f64,
    /// Greedy evaluation success on evaluation epochs.
    pub eval_success: Option<f64>,
    pub wall_ms: Option<u64>,
}

impl TraceRecord {
    pub fn from_report(r: &EpochReport, wall_ms: Option<u64>) -> Self {
        let s = &r.stats;
        Self {
            epoch: s.epoch,
            success: s.success,
            entropy: s.entropy,
            similarity: s.similarity,
            comm_count: s.comm_count,
            iei: s.iei,
            sei: s.sei,
            tei: s.tei,
            l_a: r.losses.policy,
            l_q: r.losses.value,
            l_t: r.losses.base,
            w_iei: r.losses.w_iei,
            w_sei: r.losses.w_sei,
            l_total: r.losses.total,
            eval_success: r.eval_success,
            wall_ms,
        }
    }

    /// Value of a plottable field by name; `None` for null cells.
    pub fn metric(&self, name: &str) -> Option<Option<f64>> {
        Some(match name {
            "epoch" => Some(self.epoch as f64),
            "success" => Some(self.success),
            "entropy" => self.entropy,
            "similarity" => self.similarity,
            "comm_count" => Some(self.comm_count as f64),
            "iei" => self.iei,
            "sei" => self.sei,
            "tei" => self.tei,
            "l_a" => Some(self.l_a),
            "l_q" => Some(self.l_q),
            "l_t" => Some(self.l_t),
            "w_iei" => Some(self.w_iei),
            "w_sei" => Some(self.w_sei),
            "l_total" => Some(self.l_total),
            "eval_success" => self.eval_success,
            "wall_ms" => self.wall_ms.map(|v| v as f64),
            _ => return None,
        })
    }
}

pub const METRICS: &[&str] = &[
    "success",
    "entropy",
    "similarity",
    "comm_count",
    "iei",
    "sei",
    "tei",
    "l_a",
    "l_q",
    "l_t",
    "w_iei",
    "w_sei",
    "l_total",
    "eval_success",
    "wall_ms",
];

/// Appends records to a trace file, flushing after each one so a crashed
/// run leaves every completed epoch on disk.
pub struct TraceWriter {
    file: File,
    last_epoch: Option<usize>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        Ok(Self { file: File::create(path)?, last_epoch: None })
    }

    pub fn append_to(path: &Path) -> io::Result<Self> {
        let last_epoch = read_trace(path)?.records.last().map(|r| r.epoch);
        Ok(Self { file: OpenOptions::new().append(true).open(path)?, last_epoch })
    }

    pub fn append(&mut self, record: &TraceRecord) -> io::Result<()> {
        if self.last_epoch.is_some_and(|e| record.epoch <= e) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("epoch {} does not follow epoch {}", record.epoch, self.last_epoch.unwrap_or(0)),
            ));
        }
        let line = serde_json::to_string(record).map_err(io::Error::other)?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        self.last_epoch = Some(record.epoch);
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    /// `(line number, message)` for every line that failed to parse.
    pub errors: Vec<(usize, String)>,
}

/// Reads every parseable line; blank lines are skipped, malformed ones are
/// reported with their 1-based line number.
pub fn read_trace(path: &Path) -> io::Result<Trace> {
    let mut trace = Trace::default();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(&line) {
            Ok(r) => trace.records.push(r),
            Err(e) => trace.errors.push((i + 1, e.to_string())),
        }
    }
    Ok(trace)
}

/// One epoch's sampled topologies, for offline recounting of `C_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyRecord {
    pub epoch: usize,
    pub graphs: Vec<Matrix>,
}

pub fn read_topologies(path: &Path) -> io::Result<Vec<TopologyRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        let rec = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
