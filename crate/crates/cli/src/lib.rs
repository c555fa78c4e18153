//! Command-line front-end: `train`, `eval`, `analyze`, `plot`, `compare`
//! and `export`. [`run_command`] is the whole CLI as a function so it can be
//! driven from tests.

pub mod analysis;
pub mod chart;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod trace;

use checkpoint::Checkpoint;
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use mcomm_core::training::{self, Trainer};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use trace::{read_trace, TopologyRecord, TraceRecord, TraceWriter};

pub const TRACE_FILE: &str = "trace.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TOPOLOGY_FILE: &str = "topology.jsonl";

#[derive(Parser, Debug)]
#[command(name = "mcomm", about = "Learned multi-agent communication experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a config; writes config snapshot, trace and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        label: Option<String>,
        /// Output directory (overrides the config and MCOMM_OUT_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every sampled topology to topology.jsonl.
        #[arg(long)]
        log_topology: bool,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Greedy decentralized evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate under this config's protocol instead of the snapshot's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        /// Communication rounds at execution time (default: the config's).
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Recompute efficiency indices from a trace and check the stored ones.
    Analyze {
        trace: PathBuf,
        /// Success floor; read from the run's config snapshot when omitted.
        #[arg(long)]
        floor: Option<f64>,
    },
    /// Render one metric against epoch for one or more traces as SVG.
    Plot {
        #[arg(long)]
        metric: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Final values and convergence epochs of success and TEI per run.
    Compare {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Convert a trace to CSV.
    Export {
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit status.
pub fn run_command<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let is_help = matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion);
            let _ = if is_help { write!(out, "{}", e.render()) } else { write!(err, "{}", e.render()) };
            return if is_help { 0 } else { 2 };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32, String> {
    match cmd {
        Command::Train { config, seed, epochs, label, out: dir, log_topology, resume } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| e.to_string())?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if let Some(l) = label {
                cfg.label = l;
            }
            let run_dir = match dir {
                Some(d) => {
                    cfg.output_dir = d.clone();
                    d.join(&cfg.label)
                }
                None => cfg.run_dir(),
            };
            train(&cfg, &run_dir, log_topology, resume.as_deref(), out)
        }
        Command::Eval { checkpoint, config, episodes, rounds } => eval(&checkpoint, config.as_deref(), episodes, rounds, out),
        Command::Analyze { trace, floor } => analyze(&trace, floor, out),
        Command::Plot { metric, out: file, traces } => plot(&metric, &file, &traces, out),
        Command::Compare { traces } => compare(&traces, out),
        Command::Export { trace, out: file } => {
            let problems = export::export_csv(&trace, &file).map_err(|e| format!("{}: {e}", trace.display()))?;
            for (line, msg) in &problems {
                let _ = writeln!(out, "skipped line {line}: {msg}");
            }
            let _ = writeln!(out, "wrote {}", file.display());
            Ok(0)
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> String + '_ {
    move |e| format!("{}: {e}", path.display())
}

/// Trains per `cfg`, writing into `dir`. Returns 0 on success and 1 when an
/// epoch had to be aborted (the last good state is still saved).
pub fn train(
    cfg: &ExperimentConfig,
    dir: &Path,
    log_topology: bool,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, String> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;

    let trace_path = dir.join(TRACE_FILE);
    let topo_path = dir.join(TOPOLOGY_FILE);
    let (mut trainer, mut writer, mut topo) = match resume {
        None => {
            let t = Trainer::new(cfg.env.clone(), cfg.protocol.clone(), cfg.training.clone()).map_err(|e| e.to_string())?;
            let w = TraceWriter::create(&trace_path).map_err(io_err(&trace_path))?;
            let topo = if log_topology { Some(std::fs::File::create(&topo_path).map_err(io_err(&topo_path))?) } else { None };
            (t, w, topo)
        }
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
            if ck.config.protocol != cfg.protocol || ck.config.env != cfg.env {
                return Err("checkpoint was trained under a different env or protocol".into());
            }
            let mut t = ck.restore()?;
            t.config = cfg.training.clone();
            let w = TraceWriter::append_to(&trace_path).map_err(io_err(&trace_path))?;
            let topo = if log_topology {
                Some(std::fs::OpenOptions::new().create(true).append(true).open(&topo_path).map_err(io_err(&topo_path))?)
            } else {
                None
            };
            (t, w, topo)
        }
    };

    let cfg_t = &cfg.training;
    let mut status = 0;
    while trainer.epoch < cfg_t.epochs {
        let start = Instant::now();
        let report = match trainer.train_epoch() {
            Ok(r) => r,
            Err(e) => {
                let _ = writeln!(out, "epoch {} aborted, keeping previous parameters: {e}", trainer.epoch + 1);
                status = 1;
                break;
            }
        };
        let wall = cfg.record_wall_time.then(|| start.elapsed().as_millis() as u64);
        writer.append(&TraceRecord::from_report(&report, wall)).map_err(io_err(&trace_path))?;
        if let Some(f) = topo.as_mut() {
            let rec = TopologyRecord { epoch: report.stats.epoch, graphs: report.topologies.clone() };
            let line = serde_json::to_string(&rec).map_err(|e| e.to_string())?;
            writeln!(f, "{line}").map_err(io_err(&topo_path))?;
        }
        if let Some(s) = report.eval_success {
            let _ = writeln!(out, "epoch {:>5}  train success {:.3}  greedy success {:.3}", report.stats.epoch, report.stats.success, s);
        }
        if cfg_t.checkpoint_interval > 0 && trainer.epoch % cfg_t.checkpoint_interval == 0 {
            let p = dir.join(format!("checkpoint-{:06}.json", trainer.epoch));
            Checkpoint::capture(cfg, &trainer).save(&p).map_err(io_err(&p))?;
        }
        if report.reached(cfg_t.stop_success) {
            let _ = writeln!(out, "reached target success at epoch {}", report.stats.epoch);
            break;
        }
    }
    let ck_path = dir.join(CHECKPOINT_FILE);
    Checkpoint::capture(cfg, &trainer).save(&ck_path).map_err(io_err(&ck_path))?;
    let _ = writeln!(out, "run directory {}", dir.display());
    Ok(status)
}

fn eval(path: &Path, config: Option<&Path>, episodes: usize, rounds: Option<usize>, out: &mut dyn Write) -> Result<i32, String> {
    let ck = Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| e.to_string())?,
        None => ck.config.clone(),
    };
    let protocol = cfg.protocol()?;
    ck.check_against(&protocol).map_err(|e| e.to_string())?;
    let t = &cfg.training;
    let rounds = rounds.unwrap_or_else(|| t.eval_rounds(&protocol.spec));
    let stats = training::evaluate(&protocol, &ck.params, &cfg.env, rounds, episodes, t.seed, 0, t.success_floor)
        .map_err(|e| e.to_string())?;
    let _ = writeln!(out, "{}", serde_json::to_string(&stats).map_err(|e| e.to_string())?);
    Ok(0)
}

/// Success floor from the config snapshot next to a trace, if any.
fn snapshot_floor(trace: &Path) -> Option<f64> {
    let p = trace.parent()?.join(CONFIG_FILE);
    ExperimentConfig::load(&p).ok().map(|c| c.training.success_floor)
}

fn analyze(path: &Path, floor: Option<f64>, out: &mut dyn Write) -> Result<i32, String> {
    let trace = read_trace(path).map_err(io_err(path))?;
    let floor = floor.or_else(|| snapshot_floor(path)).unwrap_or(training::TrainConfig::default().success_floor);
    for (line, msg) in &trace.errors {
        let _ = writeln!(out, "skipped line {line}: {msg}");
    }
    let mut worst: f64 = 0.0;
    let mut mismatched = Vec::new();
    for r in &trace.records {
        match analysis::discrepancy(r, floor) {
            Some(d) if d <= 1e-9 => worst = worst.max(d),
            _ => mismatched.push(r.epoch),
        }
    }
    let _ = writeln!(out, "records {}  floor {floor}  max |stored - recomputed| {worst:.3e}", trace.records.len());
    if let Some(last) = trace.records.last() {
        let fmt = |v: Option<f64>| v.map_or("null".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(
            out,
            "final epoch {}: success {:.4}  IEI {}  SEI {}  TEI {}  C {}",
            last.epoch,
            last.success,
            fmt(last.iei),
            fmt(last.sei),
            fmt(last.tei),
            last.comm_count
        );
    }
    if mismatched.is_empty() {
        Ok(0)
    } else {
        let _ = writeln!(out, "stored indices disagree at epochs {mismatched:?}");
        Ok(1)
    }
}

/// Legend label for a trace: the run directory for `.../label/trace.jsonl`,
/// otherwise the file stem.
pub fn run_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if path.file_name().is_some_and(|f| f == TRACE_FILE) {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

fn plot(metric: &str, file: &Path, traces: &[PathBuf], out: &mut dyn Write) -> Result<i32, String> {
    if !trace::METRICS.contains(&metric) {
        return Err(format!("unknown metric `{metric}`; expected one of {}", trace::METRICS.join(", ")));
    }
    let mut series = Vec::new();
    for p in traces {
        let t = read_trace(p).map_err(io_err(p))?;
        let points = t
            .records
            .iter()
            .filter_map(|r| r.metric(metric).flatten().map(|v| (r.epoch as f64, v)))
            .collect();
        series.push(chart::Series { label: run_label(p), points });
    }
    std::fs::write(file, chart::render(&series, metric)).map_err(io_err(file))?;
    let _ = writeln!(out, "wrote {}", file.display());
    Ok(0)
}

fn compare(traces: &[PathBuf], out: &mut dyn Write) -> Result<i32, String> {
    let mut rows = Vec::new();
    for p in traces {
        let t = read_trace(p).map_err(io_err(p))?;
        rows.push(analysis::compare_row(&run_label(p), &t.records));
    }
    let _ = write!(out, "{}", analysis::format_compare(&rows));
    Ok(0)
}
