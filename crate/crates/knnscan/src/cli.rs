//! Command-line front end.
//!
//! Five subcommands share one resolved configuration type:
//!
//! * `detect`      stream a file through a warmed detector, emit events
//! * `calibrate`   estimate graph functionals from a history file and solve
//!   the run-length equation for a threshold
//! * `twosample`   offline two-sample test on two observation files
//! * `simulate`    run a named experiment preset and write a report
//! * `functionals` print the motif averages for a history file
//!
//! Knobs can come from a JSON config file (`--config`); explicit flags win
//! field by field. Every run can emit its fully resolved configuration,
//! which parses back to the identical [`RunConfig`]. All outputs are
//! schema-tagged and carry SHA-256 digests of the input files, and repeated
//! invocations on the same inputs are byte-identical.

use crate::arl::{solve_threshold, ArlRequest, FunctionalEstimates};
use crate::data::{DistanceSpec, DistanceTable, Observation};
use crate::detect::{
    postprocess, step, warmup, DetectionEvent, DetectorConfig, EventStatus, StoppingRule,
    ThresholdSpec,
};
use crate::nngraph::WindowGraph;
use crate::sim::{run_preset, Generator, Preset, PresetReport, Scale};
use crate::twosample::{Group, LabeledSample};
use anyhow::Context;
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error("missing required --{0}")]
    MissingPath(&'static str),
    #[error("n1 must exceed n0 (got n0={n0}, n1={n1})")]
    N1NotAboveN0 { n0: usize, n1: usize },
    #[error("--threshold and --target-arl are mutually exclusive; choose one")]
    ThresholdConflict,
    #[error("unknown metric {0:?}; expected euclidean, normalized-count-l2, adjacency-frobenius, adjacency-frobenius-normalized, or precomputed")]
    UnknownMetric(String),
    #[error("metric {0} needs --adjacency-side")]
    MetricNeedsSide(&'static str),
    #[error("metric precomputed needs --distances")]
    MetricNeedsTable,
    #[error("unknown format {0:?}; expected csv or jsonl")]
    UnknownFormat(String),
    #[error("cannot infer the format of {0}; pass --format csv|jsonl")]
    FormatFromPath(String),
    #[error("config file is for command {file:?}, invoked as {actual:?}")]
    CommandMismatch { file: String, actual: String },
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: u64, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {source}")]
    BadConfig {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &str, source: std::io::Error) -> CliError {
    CliError::Io { path: path.to_string(), source }
}

// ---------------------------------------------------------------------------
// Configuration

/// Fully resolved run configuration. Serializing it and parsing the result
/// as a `--config` file reproduces the identical value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit_zmax: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit_config: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tsv: Option<String>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency_side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_count: Option<u64>,

    pub rule: String,
    pub k: usize,
    pub window: usize,
    pub n0: usize,
    pub n1: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_arl: Option<f64>,
    pub refresh: bool,
    pub suppression_lookback: usize,
    pub stop_on_detect: bool,

    pub permutations: usize,
    pub seed: u64,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub scale: String,
}

/// Partial configuration: what a config file or the flag layer supplies.
/// Field names match [`RunConfig`] exactly, so an emitted resolved config
/// deserializes cleanly.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RawConfig {
    command: Option<String>,
    history: Option<String>,
    input: Option<String>,
    input_a: Option<String>,
    input_b: Option<String>,
    out: Option<String>,
    emit_zmax: Option<String>,
    emit_config: Option<String>,
    tsv: Option<String>,
    format: Option<String>,
    metric: Option<String>,
    distances: Option<String>,
    adjacency_side: Option<usize>,
    min_count: Option<u64>,
    rule: Option<String>,
    k: Option<usize>,
    window: Option<usize>,
    n0: Option<usize>,
    n1: Option<usize>,
    threshold: Option<f64>,
    target_arl: Option<f64>,
    refresh: Option<bool>,
    suppression_lookback: Option<usize>,
    stop_on_detect: Option<bool>,
    permutations: Option<usize>,
    seed: Option<u64>,
    preset: Option<String>,
    scale: Option<String>,
}

impl RawConfig {
    fn from_file(path: &str) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::BadConfig {
            path: path.to_string(),
            source: e,
        })
    }

    /// Overlay `flags` on top of `self`: a flag that was given wins.
    fn overlay(mut self, flags: RawConfig) -> Self {
        macro_rules! take {
            ($($f:ident),+ $(,)?) => { $( if flags.$f.is_some() { self.$f = flags.$f; } )+ };
        }
        take!(
            command, history, input, input_a, input_b, out, emit_zmax, emit_config, tsv,
            format, metric, distances, adjacency_side, min_count, rule, k, window, n0, n1,
            threshold, target_arl, refresh, suppression_lookback, stop_on_detect,
            permutations, seed, preset, scale,
        );
        self
    }
}

// ---------------------------------------------------------------------------
// Flag definitions

#[derive(Debug, Parser)]
#[command(name = "knnscan", about = "streaming change detection on nearest-neighbor graphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Warm a detector on a history file, then scan a stream for changes.
    Detect(DetectArgs),
    /// Solve the average-run-length equation for a threshold, from history data.
    Calibrate(CalibrateArgs),
    /// Two-sample graph test on two observation files.
    Twosample(TwosampleArgs),
    /// Run a named experiment preset and write a report.
    Simulate(SimulateArgs),
    /// Print the motif averages of a history file.
    Functionals(FunctionalsArgs),
}

#[derive(Debug, Args)]
struct IngestFlags {
    /// Input format: csv or jsonl (default: inferred from the extension).
    #[arg(long)]
    format: Option<String>,
    /// Distance: euclidean, normalized-count-l2, adjacency-frobenius,
    /// adjacency-frobenius-normalized, or precomputed.
    #[arg(long)]
    metric: Option<String>,
    /// CSV of (key, key, distance) triples for the precomputed metric.
    #[arg(long)]
    distances: Option<String>,
    /// Matrix side length for the adjacency metrics.
    #[arg(long)]
    adjacency_side: Option<usize>,
    /// Drop count rows whose total is below this value.
    #[arg(long)]
    min_count: Option<u64>,
}

#[derive(Debug, Args)]
struct WindowFlags {
    /// Neighbors per point.
    #[arg(long)]
    k: Option<usize>,
    /// Window length L.
    #[arg(long, visible_alias = "l")]
    window: Option<usize>,
    /// Smallest group size the scan considers.
    #[arg(long)]
    n0: Option<usize>,
    /// Largest lookback the scan considers.
    #[arg(long)]
    n1: Option<usize>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    config: Option<String>,
    #[command(flatten)]
    ingest: IngestFlags,
    #[command(flatten)]
    win: WindowFlags,
    /// Stopping rule: t1, t2, or t3.
    #[arg(long)]
    rule: Option<String>,
    /// Change-free history file used for warmup.
    #[arg(long)]
    history: Option<String>,
    /// Stream to scan, processed strictly in order.
    #[arg(long)]
    input: Option<String>,
    /// Events output (JSONL).
    #[arg(long)]
    out: Option<String>,
    /// Per-step scan trace output (TSV).
    #[arg(long)]
    emit_zmax: Option<String>,
    /// Write the fully resolved configuration here.
    #[arg(long)]
    emit_config: Option<String>,
    /// Fixed detection threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Solve the analytic run-length equation for this target instead.
    #[arg(long)]
    target_arl: Option<f64>,
    /// Freeze the functional estimates after warmup.
    #[arg(long, action = ArgAction::SetTrue)]
    no_refresh: bool,
    /// Steps a fresh crossing is silenced after a previous one.
    #[arg(long)]
    suppression_lookback: Option<usize>,
    /// Exit with status 2 at the first valid detection.
    #[arg(long, action = ArgAction::SetTrue)]
    stop_on_detect: bool,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<String>,
    #[command(flatten)]
    ingest: IngestFlags,
    #[command(flatten)]
    win: WindowFlags,
    /// Change-free history file.
    #[arg(long)]
    history: Option<String>,
    /// Report output (JSON); the human table always goes to stdout.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    emit_config: Option<String>,
    /// Average run length to solve for.
    #[arg(long)]
    target_arl: Option<f64>,
}

#[derive(Debug, Args)]
struct TwosampleArgs {
    #[arg(long)]
    config: Option<String>,
    #[command(flatten)]
    ingest: IngestFlags,
    /// Neighbors per point.
    #[arg(long)]
    k: Option<usize>,
    /// First sample.
    #[arg(long)]
    input_a: Option<String>,
    /// Second sample.
    #[arg(long)]
    input_b: Option<String>,
    /// Report output (JSON); the summary always goes to stdout.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    emit_config: Option<String>,
    /// Permutation draws for the Monte Carlo p-value (0 = skip).
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<String>,
    /// table1, table2, table3, fig1, fig5, or fig7.
    #[arg(long)]
    preset: Option<String>,
    /// desk (sized for one core) or paper (full grids, expensive).
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report output (JSON).
    #[arg(long)]
    out: Option<String>,
    /// Flat per-cell table for plotting (default: out with a .tsv extension).
    #[arg(long)]
    tsv: Option<String>,
    #[arg(long)]
    emit_config: Option<String>,
}

#[derive(Debug, Args)]
struct FunctionalsArgs {
    #[arg(long)]
    config: Option<String>,
    #[command(flatten)]
    ingest: IngestFlags,
    #[command(flatten)]
    win: WindowFlags,
    /// History file to average over.
    #[arg(long)]
    history: Option<String>,
    /// Report output (JSON); the table always goes to stdout.
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    emit_config: Option<String>,
}

impl IngestFlags {
    fn fold(self, raw: &mut RawConfig) {
        raw.format = self.format;
        raw.metric = self.metric;
        raw.distances = self.distances;
        raw.adjacency_side = self.adjacency_side;
        raw.min_count = self.min_count;
    }
}

impl WindowFlags {
    fn fold(self, raw: &mut RawConfig) {
        raw.k = self.k;
        raw.window = self.window;
        raw.n0 = self.n0;
        raw.n1 = self.n1;
    }
}

// ---------------------------------------------------------------------------
// Resolution

/// Parse an argv into a resolved configuration plus the log lines describing
/// every knob that fell back to a default.
pub fn parse_config<I, S>(argv: I) -> Result<(RunConfig, Vec<String>), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    let (command, config_path, mut flags) = match cli.cmd {
        Command::Detect(a) => {
            let mut raw = RawConfig::default();
            let cfg = a.config.clone();
            a.ingest.fold(&mut raw);
            a.win.fold(&mut raw);
            raw.rule = a.rule;
            raw.history = a.history;
            raw.input = a.input;
            raw.out = a.out;
            raw.emit_zmax = a.emit_zmax;
            raw.emit_config = a.emit_config;
            raw.threshold = a.threshold;
            raw.target_arl = a.target_arl;
            if a.no_refresh {
                raw.refresh = Some(false);
            }
            raw.suppression_lookback = a.suppression_lookback;
            if a.stop_on_detect {
                raw.stop_on_detect = Some(true);
            }
            ("detect", cfg, raw)
        }
        Command::Calibrate(a) => {
            let mut raw = RawConfig::default();
            let cfg = a.config.clone();
            a.ingest.fold(&mut raw);
            a.win.fold(&mut raw);
            raw.history = a.history;
            raw.out = a.out;
            raw.emit_config = a.emit_config;
            raw.target_arl = a.target_arl;
            ("calibrate", cfg, raw)
        }
        Command::Twosample(a) => {
            let mut raw = RawConfig::default();
            let cfg = a.config.clone();
            a.ingest.fold(&mut raw);
            raw.k = a.k;
            raw.input_a = a.input_a;
            raw.input_b = a.input_b;
            raw.out = a.out;
            raw.emit_config = a.emit_config;
            raw.permutations = a.permutations;
            raw.seed = a.seed;
            ("twosample", cfg, raw)
        }
        Command::Simulate(a) => {
            let mut raw = RawConfig::default();
            let cfg = a.config.clone();
            raw.preset = a.preset;
            raw.scale = a.scale;
            raw.seed = a.seed;
            raw.out = a.out;
            raw.tsv = a.tsv;
            raw.emit_config = a.emit_config;
            ("simulate", cfg, raw)
        }
        Command::Functionals(a) => {
            let mut raw = RawConfig::default();
            let cfg = a.config.clone();
            a.ingest.fold(&mut raw);
            a.win.fold(&mut raw);
            raw.history = a.history;
            raw.out = a.out;
            raw.emit_config = a.emit_config;
            ("functionals", cfg, raw)
        }
    };
    flags.command = Some(command.to_string());

    let merged = match config_path {
        Some(path) => {
            let file = RawConfig::from_file(&path)?;
            if let Some(file_cmd) = &file.command {
                if file_cmd != command {
                    return Err(CliError::CommandMismatch {
                        file: file_cmd.clone(),
                        actual: command.to_string(),
                    });
                }
            }
            file.overlay(flags)
        }
        None => flags,
    };
    resolve(command, merged)
}

fn note_default(log: &mut Vec<String>, name: &str, value: impl std::fmt::Display) {
    log.push(format!("{name} = {value} (default)"));
}

fn resolve(command: &str, raw: RawConfig) -> Result<(RunConfig, Vec<String>), CliError> {
    let mut log = Vec::new();

    let window = match raw.window {
        Some(w) => w,
        None => {
            note_default(&mut log, "window L", 200);
            200
        }
    };
    let n0 = match raw.n0 {
        Some(v) => v,
        None => {
            note_default(&mut log, "n0", 3);
            3
        }
    };
    let n1 = match raw.n1 {
        Some(v) => v,
        None => {
            let v = window.saturating_sub(n0);
            note_default(&mut log, "n1", format!("{v} (window - n0)"));
            v
        }
    };
    if n1 <= n0 {
        return Err(CliError::N1NotAboveN0 { n0, n1 });
    }
    let k = match raw.k {
        Some(v) => v,
        None => {
            note_default(&mut log, "k", 1);
            1
        }
    };
    let rule = match raw.rule {
        Some(v) => v,
        None => {
            if command == "detect" {
                note_default(&mut log, "rule", "t3");
            }
            "t3".to_string()
        }
    };

    let (threshold, target_arl) = match (raw.threshold, raw.target_arl) {
        (Some(_), Some(_)) => return Err(CliError::ThresholdConflict),
        (Some(b), None) => (Some(b), None),
        (None, Some(a)) => (None, Some(a)),
        (None, None) => {
            if matches!(command, "detect" | "calibrate") {
                note_default(&mut log, "target run length", 10_000);
            }
            (None, Some(10_000.0))
        }
    };

    let refresh = match raw.refresh {
        Some(v) => v,
        None => {
            if command == "detect" {
                note_default(&mut log, "refresh cadence", "every non-event window");
            }
            true
        }
    };
    if matches!(command, "detect" | "calibrate" | "functionals" | "twosample") {
        log.push("tie-break = earliest split wins (fixed)".to_string());
    }

    let metric = raw.metric.unwrap_or_else(|| "euclidean".to_string());
    let suppression_lookback = raw.suppression_lookback.unwrap_or(5);
    let seed = match raw.seed {
        Some(v) => v,
        None => {
            if matches!(command, "simulate" | "twosample") {
                note_default(&mut log, "seed", 0);
            }
            0
        }
    };
    let scale = match raw.scale {
        Some(v) => v,
        None => {
            if command == "simulate" {
                note_default(&mut log, "scale", "desk");
            }
            "desk".to_string()
        }
    };

    let cfg = RunConfig {
        command: command.to_string(),
        history: raw.history,
        input: raw.input,
        input_a: raw.input_a,
        input_b: raw.input_b,
        out: raw.out,
        emit_zmax: raw.emit_zmax,
        emit_config: raw.emit_config,
        tsv: raw.tsv,
        format: raw.format,
        metric,
        distances: raw.distances,
        adjacency_side: raw.adjacency_side,
        min_count: raw.min_count,
        rule,
        k,
        window,
        n0,
        n1,
        threshold,
        target_arl,
        refresh,
        suppression_lookback,
        stop_on_detect: raw.stop_on_detect.unwrap_or(false),
        permutations: raw.permutations.unwrap_or(0),
        seed,
        preset: raw.preset,
        scale,
    };
    validate_required(&cfg)?;
    Ok((cfg, log))
}

fn validate_required(cfg: &RunConfig) -> Result<(), CliError> {
    let need = |opt: &Option<String>, flag: &'static str| {
        opt.as_deref()
            .map(|_| ())
            .ok_or(CliError::MissingPath(flag))
    };
    match cfg.command.as_str() {
        "detect" => {
            need(&cfg.history, "history")?;
            need(&cfg.input, "input")?;
            need(&cfg.out, "out")?;
        }
        "calibrate" | "functionals" => need(&cfg.history, "history")?,
        "twosample" => {
            need(&cfg.input_a, "input-a")?;
            need(&cfg.input_b, "input-b")?;
        }
        "simulate" => {
            need(&cfg.preset, "preset")?;
            need(&cfg.out, "out")?;
        }
        _ => {}
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Csv,
    Jsonl,
}

fn resolve_format(path: &str, flag: Option<&str>) -> Result<Format, CliError> {
    if let Some(f) = flag {
        return match f {
            "csv" => Ok(Format::Csv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(CliError::UnknownFormat(other.to_string())),
        };
    }
    match Path::new(path).extension().and_then(|e| e.to_str()) {
        Some("csv") => Ok(Format::Csv),
        Some("jsonl") | Some("ndjson") | Some("json") => Ok(Format::Jsonl),
        _ => Err(CliError::FormatFromPath(path.to_string())),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    index: u64,
    #[serde(default)]
    vector: Option<Vec<f64>>,
    #[serde(default)]
    key: Option<String>,
}

/// Read one observation file. CSV rows are indexed sequentially from
/// `start`; JSONL records carry their own indices, which must increase by
/// one within the file. Rows whose coordinate total falls below `min_count`
/// are dropped before indexing.
fn read_observations(
    path: &str,
    flag: Option<&str>,
    start: u64,
    min_count: Option<u64>,
) -> Result<Vec<Observation>, CliError> {
    let format = resolve_format(path, flag)?;
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    match format {
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .trim(csv::Trim::All)
                .from_reader(BufReader::new(file));
            let mut next = start;
            for record in reader.records() {
                let record = record.map_err(|e| CliError::Malformed {
                    path: path.to_string(),
                    line: e.position().map_or(0, |p| p.line()),
                    msg: e.to_string(),
                })?;
                let line = record.position().map_or(0, |p| p.line());
                let mut values = Vec::with_capacity(record.len());
                for field in record.iter() {
                    let v: f64 = field.parse().map_err(|_| CliError::Malformed {
                        path: path.to_string(),
                        line,
                        msg: format!("not a number: {field:?}"),
                    })?;
                    values.push(v);
                }
                if values.is_empty() {
                    return Err(CliError::Malformed {
                        path: path.to_string(),
                        line,
                        msg: "empty row".to_string(),
                    });
                }
                if below_min_count(&values, min_count) {
                    continue;
                }
                out.push(Observation::vector(next, values));
                next += 1;
            }
        }
        Format::Jsonl => {
            let reader = BufReader::new(file);
            let mut prev: Option<u64> = None;
            for (zero_line, text) in reader.lines().enumerate() {
                let line = zero_line as u64 + 1;
                let text = text.map_err(|e| io_err(path, e))?;
                if text.trim().is_empty() {
                    continue;
                }
                let rec: JsonRecord =
                    serde_json::from_str(&text).map_err(|e| CliError::Malformed {
                        path: path.to_string(),
                        line,
                        msg: e.to_string(),
                    })?;
                let malformed = |msg: &str| CliError::Malformed {
                    path: path.to_string(),
                    line,
                    msg: msg.to_string(),
                };
                if let Some(p) = prev {
                    if rec.index != p + 1 {
                        return Err(malformed(&format!(
                            "index {} does not follow {}",
                            rec.index, p
                        )));
                    }
                }
                prev = Some(rec.index);
                let obs = match (rec.vector, rec.key) {
                    (Some(v), None) => {
                        if v.is_empty() {
                            return Err(malformed("empty vector"));
                        }
                        if below_min_count(&v, min_count) {
                            prev = Some(rec.index);
                            continue;
                        }
                        Observation::vector(rec.index, v)
                    }
                    (None, Some(kk)) => {
                        if min_count.is_some() {
                            return Err(malformed("min-count needs count vectors, got a key"));
                        }
                        Observation::keyed(rec.index, kk)
                    }
                    _ => return Err(malformed("need exactly one of \"vector\" and \"key\"")),
                };
                out.push(obs);
            }
        }
    }
    Ok(out)
}

fn below_min_count(values: &[f64], min_count: Option<u64>) -> bool {
    match min_count {
        Some(m) => values.iter().sum::<f64>() < m as f64,
        None => false,
    }
}

fn load_distances(path: &str) -> Result<DistanceTable, CliError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let mut table = DistanceTable::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Malformed {
            path: path.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |msg: String| CliError::Malformed {
            path: path.to_string(),
            line,
            msg,
        };
        if record.len() != 3 {
            return Err(malformed(format!("expected 3 fields, got {}", record.len())));
        }
        let d: f64 = record[2]
            .parse()
            .map_err(|_| malformed(format!("not a number: {:?}", &record[2])))?;
        table.insert(&record[0], &record[1], d);
    }
    Ok(table)
}

fn resolve_metric(cfg: &RunConfig) -> Result<DistanceSpec, CliError> {
    match cfg.metric.as_str() {
        "euclidean" => Ok(DistanceSpec::Euclidean),
        "normalized-count-l2" => Ok(DistanceSpec::NormalizedCountL2),
        "adjacency-frobenius" => {
            let side = cfg
                .adjacency_side
                .ok_or(CliError::MetricNeedsSide("adjacency-frobenius"))?;
            Ok(DistanceSpec::AdjacencyFrobenius { side })
        }
        "adjacency-frobenius-normalized" => {
            let side = cfg
                .adjacency_side
                .ok_or(CliError::MetricNeedsSide("adjacency-frobenius-normalized"))?;
            Ok(DistanceSpec::AdjacencyFrobeniusNormalized { side })
        }
        "precomputed" => {
            let path = cfg.distances.as_deref().ok_or(CliError::MetricNeedsTable)?;
            let table = load_distances(path)?;
            Ok(DistanceSpec::Precomputed { table: Arc::new(table) })
        }
        other => Err(CliError::UnknownMetric(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Provenance and output plumbing

fn sha256_hex(path: &str) -> Result<String, CliError> {
    use std::io::Read;
    let mut file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

fn input_digests(cfg: &RunConfig) -> Result<BTreeMap<&'static str, String>, CliError> {
    let mut map = BTreeMap::new();
    let mut add = |name: &'static str, path: &Option<String>| -> Result<(), CliError> {
        if let Some(p) = path {
            map.insert(name, sha256_hex(p)?);
        }
        Ok(())
    };
    add("history", &cfg.history)?;
    add("input", &cfg.input)?;
    add("input_a", &cfg.input_a)?;
    add("input_b", &cfg.input_b)?;
    add("distances", &cfg.distances)?;
    Ok(map)
}

#[derive(Serialize)]
struct Provenance<'a> {
    schema: &'static str,
    config: &'a RunConfig,
    sha256: &'a BTreeMap<&'static str, String>,
}

fn create(path: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn emit_config_if_asked(cfg: &RunConfig) -> anyhow::Result<()> {
    if let Some(path) = &cfg.emit_config {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, cfg)?;
        writeln!(w)?;
        w.flush()?;
    }
    Ok(())
}

fn write_json_report<T: Serialize>(path: &str, report: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush().context("flushing report")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Entry points

/// Parse an argv, echo defaulted knobs to stderr, and run. Returns the
/// process exit code.
pub fn main_entry<I, S>(argv: I) -> anyhow::Result<u8>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let (cfg, log) = parse_config(argv)?;
    for line in &log {
        eprintln!("[knnscan] {line}");
    }
    run(&cfg)
}

/// Execute a resolved configuration.
pub fn run(cfg: &RunConfig) -> anyhow::Result<u8> {
    emit_config_if_asked(cfg)?;
    match cfg.command.as_str() {
        "detect" => run_detect(cfg),
        "calibrate" => run_calibrate(cfg),
        "twosample" => run_twosample(cfg),
        "simulate" => run_simulate(cfg),
        "functionals" => run_functionals(cfg),
        other => anyhow::bail!("unknown command {other:?}"),
    }
}

fn parse_rule(s: &str) -> anyhow::Result<StoppingRule> {
    match s {
        "t1" => Ok(StoppingRule::T1),
        "t2" => Ok(StoppingRule::T2),
        "t3" => Ok(StoppingRule::T3),
        other => anyhow::bail!("unknown rule {other:?}; expected t1, t2, or t3"),
    }
}

fn run_detect(cfg: &RunConfig) -> anyhow::Result<u8> {
    let spec = resolve_metric(cfg)?;
    let history_path = cfg.history.as_deref().expect("validated");
    let input_path = cfg.input.as_deref().expect("validated");
    let out_path = cfg.out.as_deref().expect("validated");

    let history = read_observations(history_path, cfg.format.as_deref(), 1, cfg.min_count)?;
    anyhow::ensure!(!history.is_empty(), "{history_path}: no usable history rows");
    let next_index = history.last().expect("nonempty").index + 1;

    let det_cfg = DetectorConfig {
        rule: parse_rule(&cfg.rule)?,
        k: cfg.k,
        l: cfg.window,
        n0: cfg.n0,
        n1: cfg.n1,
        threshold: match (cfg.threshold, cfg.target_arl) {
            (Some(b), _) => ThresholdSpec::Fixed(b),
            (None, Some(a)) => ThresholdSpec::TargetArl(a),
            (None, None) => unreachable!("resolution supplies a default"),
        },
        n_history: history.len(),
        functional_refresh: cfg.refresh,
        suppression_lookback: cfg.suppression_lookback,
    };
    let mut state = warmup(det_cfg, spec, &history).context("warming the detector")?;
    eprintln!("[knnscan] threshold b = {}", state.threshold());

    let stream = read_observations(input_path, cfg.format.as_deref(), next_index, cfg.min_count)?;
    if let Some(first) = stream.first() {
        anyhow::ensure!(
            first.index == next_index,
            "{input_path}: stream must continue the history indices \
             (history ends at {}, stream starts at {})",
            next_index - 1,
            first.index,
        );
    }

    let digests = input_digests(cfg)?;
    let mut events_w = create(out_path)?;
    let provenance = Provenance {
        schema: "knnscan.events.v1",
        config: cfg,
        sha256: &digests,
    };
    writeln!(events_w, "{}", serde_json::to_string(&provenance)?)?;

    let mut zmax_w = match &cfg.emit_zmax {
        Some(path) => {
            let mut w = create(path)?;
            writeln!(w, "# schema=knnscan.zmax.v1")?;
            writeln!(w, "# config={}", serde_json::to_string(cfg)?)?;
            for (name, digest) in &digests {
                writeln!(w, "# sha256.{name}={digest}")?;
            }
            writeln!(w, "n\tmax_z\targmax_t\tthreshold")?;
            Some(w)
        }
        None => None,
    };

    // Post-processing uses only past events, so each event's final status is
    // known the moment it fires and lines can stream out immediately.
    let mut raws: Vec<DetectionEvent> = Vec::new();
    let mut exit = 0u8;
    for obs in stream {
        let outcome = step(&mut state, obs).context("stepping the detector")?;
        if let Some((max_z, argmax_t)) = outcome.zmax {
            if let Some(w) = zmax_w.as_mut() {
                writeln!(w, "{}\t{}\t{}\t{}", outcome.n, max_z, argmax_t, state.threshold())?;
            }
        }
        if outcome.event.is_some() {
            raws.push(outcome.event.expect("checked"));
            let refined = postprocess(&raws, state.config());
            let newest = refined.last().expect("just pushed").clone();
            writeln!(events_w, "{}", serde_json::to_string(&newest)?)?;
            if cfg.stop_on_detect && newest.status == EventStatus::Valid {
                exit = 2;
                break;
            }
        }
    }
    events_w.flush().context("flushing events")?;
    if let Some(mut w) = zmax_w {
        w.flush().context("flushing the scan trace")?;
    }
    Ok(exit)
}

/// Average the functional estimates over every full window of a history.
fn estimates_over(
    history: Vec<Observation>,
    window: usize,
    k: usize,
    spec: DistanceSpec,
) -> anyhow::Result<FunctionalEstimates> {
    let points = history.len();
    let mut graph = WindowGraph::sliding(window, k, spec)?;
    let mut est: Option<FunctionalEstimates> = None;
    for obs in history {
        graph.push(obs)?;
        if graph.is_ready() {
            let f = graph.functionals()?;
            match est.as_mut() {
                Some(e) => e.update(&f),
                None => est = Some(FunctionalEstimates::from_window(&f)),
            }
        }
    }
    est.ok_or_else(|| {
        anyhow::anyhow!("history has {points} usable rows, which is shorter than the window {window}")
    })
}

fn print_estimates(est: &FunctionalEstimates) {
    println!("windows averaged              {}", est.windows);
    println!("k                             {}", est.k);
    println!("window L                      {}", est.l);
    println!("mutual pairs per node         {:.6}", est.pkl);
    println!("shared-neighbor pairs / node  {:.6}", est.qkl);
    println!("rank-k mutual rate            {:.6}", est.pkl_k);
    println!("rank-k shared rate            {:.6}", est.qkl_k);
    let names = [
        "edges into one node, triple",
        "mutual pair + extra in-edge",
        "edge + in-edge at each end",
        "directed three-cycles",
        "out-pair closed by an edge",
    ];
    for (name, value) in names.iter().zip(est.motif3.iter()) {
        println!("{name:<29} {value:.6}");
    }
}

#[derive(Serialize)]
struct CalibrateReport<'a> {
    schema: &'static str,
    config: &'a RunConfig,
    sha256: BTreeMap<&'static str, String>,
    estimates: &'a FunctionalEstimates,
    target_run_length: f64,
    threshold_asymptotic: f64,
    threshold_corrected: f64,
}

fn run_calibrate(cfg: &RunConfig) -> anyhow::Result<u8> {
    let spec = resolve_metric(cfg)?;
    let history_path = cfg.history.as_deref().expect("validated");
    let history = read_observations(history_path, cfg.format.as_deref(), 1, cfg.min_count)?;
    let est = estimates_over(history, cfg.window, cfg.k, spec)?;

    let target = cfg.target_arl.expect("resolution supplies a default");
    let template = ArlRequest {
        b: 0.0,
        l: cfg.window,
        n0: cfg.n0,
        n1: cfg.n1,
        functionals: &est,
        skewness_corrected: false,
    };
    let asymptotic = solve_threshold(target, &template)?;
    let corrected = solve_threshold(
        target,
        &ArlRequest { skewness_corrected: true, ..template.clone() },
    )?;

    print_estimates(&est);
    println!("target run length             {target}");
    println!("threshold, asymptotic         {asymptotic:.6}");
    println!("threshold, skewness-corrected {corrected:.6}");

    if let Some(out) = &cfg.out {
        write_json_report(
            out,
            &CalibrateReport {
                schema: "knnscan.calibrate.v1",
                config: cfg,
                sha256: input_digests(cfg)?,
                estimates: &est,
                target_run_length: target,
                threshold_asymptotic: asymptotic,
                threshold_corrected: corrected,
            },
        )?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct FunctionalsReport<'a> {
    schema: &'static str,
    config: &'a RunConfig,
    sha256: BTreeMap<&'static str, String>,
    estimates: &'a FunctionalEstimates,
}

fn run_functionals(cfg: &RunConfig) -> anyhow::Result<u8> {
    let spec = resolve_metric(cfg)?;
    let history_path = cfg.history.as_deref().expect("validated");
    let history = read_observations(history_path, cfg.format.as_deref(), 1, cfg.min_count)?;
    let est = estimates_over(history, cfg.window, cfg.k, spec)?;
    print_estimates(&est);
    if let Some(out) = &cfg.out {
        write_json_report(
            out,
            &FunctionalsReport {
                schema: "knnscan.functionals.v1",
                config: cfg,
                sha256: input_digests(cfg)?,
                estimates: &est,
            },
        )?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct TwosampleReport<'a> {
    schema: &'static str,
    config: &'a RunConfig,
    sha256: BTreeMap<&'static str, String>,
    n1: usize,
    n2: usize,
    k: usize,
    statistic: u64,
    expectation: f64,
    variance: f64,
    z: f64,
    permutations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_value: Option<f64>,
}

fn run_twosample(cfg: &RunConfig) -> anyhow::Result<u8> {
    let spec = resolve_metric(cfg)?;
    let path_a = cfg.input_a.as_deref().expect("validated");
    let path_b = cfg.input_b.as_deref().expect("validated");
    let sample_a = read_observations(path_a, cfg.format.as_deref(), 1, cfg.min_count)?;
    let sample_b = read_observations(path_b, cfg.format.as_deref(), 1, cfg.min_count)?;
    let (n1, n2) = (sample_a.len(), sample_b.len());
    anyhow::ensure!(n1 > 0, "{path_a}: no usable rows");
    anyhow::ensure!(n2 > 0, "{path_b}: no usable rows");

    // The test only cares about group membership, so the two files are
    // re-indexed into one contiguous sequence, first file first.
    let mut graph = WindowGraph::sliding(n1 + n2, cfg.k, spec)?;
    for (i, mut obs) in sample_a.into_iter().chain(sample_b).enumerate() {
        obs.index = i as u64 + 1;
        graph.push(obs)?;
    }
    let labels: Vec<Group> = (0..n1 + n2)
        .map(|i| if i < n1 { Group::First } else { Group::Second })
        .collect();
    let sample = LabeledSample::new(&graph, labels)?;
    let summary = sample.summary()?;
    let p_value = if cfg.permutations > 0 {
        Some(sample.permutation_pvalue(cfg.permutations, cfg.seed)?)
    } else {
        None
    };

    println!("n1, n2                {} {}", n1, n2);
    println!("cross edges X         {}", summary.statistic);
    println!("E[X] under the null   {:.6}", summary.expectation);
    println!("Var[X] under the null {:.6}", summary.variance);
    println!("Z                     {:.6}", summary.z);
    if let Some(p) = p_value {
        println!("permutation p-value   {:.6}  ({} draws, seed {})", p, cfg.permutations, cfg.seed);
    }

    if let Some(out) = &cfg.out {
        write_json_report(
            out,
            &TwosampleReport {
                schema: "knnscan.twosample.v1",
                config: cfg,
                sha256: input_digests(cfg)?,
                n1,
                n2,
                k: cfg.k,
                statistic: summary.statistic,
                expectation: summary.expectation,
                variance: summary.variance,
                z: summary.z,
                permutations: cfg.permutations,
                p_value,
            },
        )?;
    }
    Ok(0)
}

fn generator_str(g: Generator) -> String {
    match g {
        Generator::GaussianShift => "gaussian-shift".to_string(),
        Generator::LognormalShift => "lognormal-shift".to_string(),
        Generator::GradualShift { .. } => "gradual-shift".to_string(),
    }
}

fn opt_str<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_preset_tsv(path: &str, report: &PresetReport) -> anyhow::Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# schema=knnscan.simulate.tsv.v1")?;
    writeln!(
        w,
        "# preset={} scale={} seed={} shift_direction={}",
        report.preset, report.scale, report.seed, report.shift_direction
    )?;
    writeln!(
        w,
        "label\trule\tstatistic\tk\td\tL\tn0\tn1\tgenerator\tdelta\tgradual_length\t\
         threshold\tthreshold_lo95\tthreshold_hi95\tasymptotic_b\tcorrected_b\t\
         power\tedd\tfailure_i\tfailure_ii\tnote"
    )?;
    for cell in &report.cells {
        let p = &cell.params;
        let cal = cell.calibration.as_ref();
        let ana = cell.analytic.as_ref();
        let res = cell.result.as_ref();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            cell.label,
            p.rule.as_str(),
            p.statistic,
            opt_str(p.k),
            p.d,
            p.l,
            p.n0,
            p.n1,
            p.generator.map_or_else(String::new, generator_str),
            opt_str(p.delta),
            opt_str(p.gradual_length),
            opt_str(cal.map(|c| c.b)),
            opt_str(cal.map(|c| c.lo95)),
            opt_str(cal.map(|c| c.hi95)),
            opt_str(ana.map(|a| a.asymptotic)),
            opt_str(ana.map(|a| a.skewness_corrected)),
            opt_str(res.map(|r| r.power)),
            opt_str(res.and_then(|r| r.edd)),
            opt_str(res.map(|r| r.failure_i)),
            opt_str(res.map(|r| r.failure_ii)),
            cell.note.as_deref().unwrap_or(""),
        )?;
    }
    w.flush().context("flushing the preset table")?;
    Ok(())
}

fn run_simulate(cfg: &RunConfig) -> anyhow::Result<u8> {
    let preset: Preset = cfg.preset.as_deref().expect("validated").parse()?;
    let scale: Scale = cfg.scale.parse()?;
    let out = cfg.out.as_deref().expect("validated");
    eprintln!(
        "[knnscan] running preset {} at {} scale; the large presets take tens of minutes on one core",
        preset.as_str(),
        scale.as_str()
    );
    let report = run_preset(preset, scale, cfg.seed)?;
    write_json_report(out, &report)?;
    let tsv_path = match &cfg.tsv {
        Some(p) => p.clone(),
        None => Path::new(out).with_extension("tsv").to_string_lossy().into_owned(),
    };
    write_preset_tsv(&tsv_path, &report)?;
    eprintln!("[knnscan] wrote {out} and {tsv_path}");
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read as _;

    fn args(list: &[&str]) -> Vec<String> {
        std::iter::once("knnscan")
            .chain(list.iter().copied())
            .map(String::from)
            .collect()
    }

    fn write_gaussian_csv(path: &Path, rows: usize, d: usize, seed: u64, shift: f64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let mut text = String::new();
        for _ in 0..rows {
            let row: Vec<String> = (0..d)
                .map(|_| {
                    let v: f64 = rng.sample(normal);
                    format!("{}", v + shift)
                })
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        std::fs::write(path, text).unwrap();
    }

    #[test]
    fn defaults_are_filled_and_echoed() {
        let (cfg, log) = parse_config(args(&[
            "detect", "--history", "h.csv", "--input", "s.csv", "--out", "e.jsonl",
        ]))
        .unwrap();
        assert_eq!(cfg.window, 200);
        assert_eq!(cfg.n0, 3);
        assert_eq!(cfg.n1, 197);
        assert_eq!(cfg.k, 1);
        assert_eq!(cfg.rule, "t3");
        assert_eq!(cfg.target_arl, Some(10_000.0));
        assert!(cfg.threshold.is_none());
        assert!(cfg.refresh);
        assert_eq!(cfg.suppression_lookback, 5);
        for knob in ["window L", "n0", "n1", "k", "rule", "target run length", "refresh"] {
            assert!(
                log.iter().any(|l| l.contains(knob)),
                "no echo for {knob}: {log:?}"
            );
        }
        assert!(log.iter().any(|l| l.contains("tie-break")));
    }

    #[test]
    fn n1_must_exceed_n0() {
        let err = parse_config(args(&[
            "detect", "--history", "h.csv", "--input", "s.csv", "--out", "e.jsonl",
            "--n0", "10", "--n1", "5",
        ]))
        .unwrap_err();
        assert!(err.to_string().contains("n1 must exceed n0"), "{err}");
    }

    #[test]
    fn threshold_and_target_conflict() {
        let err = parse_config(args(&[
            "detect", "--history", "h.csv", "--input", "s.csv", "--out", "e.jsonl",
            "--threshold", "4.0", "--target-arl", "10000",
        ]))
        .unwrap_err();
        assert!(matches!(err, CliError::ThresholdConflict));
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, _) = parse_config(args(&[
            "detect", "--history", "h.csv", "--input", "s.jsonl", "--out", "e.jsonl",
            "--k", "3", "--window", "60", "--threshold", "4.25", "--stop-on-detect",
            "--metric", "normalized-count-l2", "--min-count", "200",
        ]))
        .unwrap();
        let path = dir.path().join("resolved.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let (again, log) = parse_config(args(&[
            "detect", "--config", path.to_str().unwrap(),
        ]))
        .unwrap();
        assert_eq!(cfg, again);
        // Nothing defaulted the second time around except the fixed notes.
        assert!(log.iter().all(|l| !l.contains("(default)")), "{log:?}");
    }

    #[test]
    fn flags_override_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"command":"calibrate","history":"h.csv","k":3,"window":100}"#,
        )
        .unwrap();
        let (cfg, _) = parse_config(args(&[
            "calibrate", "--config", path.to_str().unwrap(), "--k", "5",
        ]))
        .unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.window, 100);
        assert_eq!(cfg.history.as_deref(), Some("h.csv"));
    }

    #[test]
    fn config_for_the_wrong_command_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"command":"detect"}"#).unwrap();
        let err = parse_config(args(&[
            "calibrate", "--history", "h.csv", "--config", path.to_str().unwrap(),
        ]))
        .unwrap_err();
        assert!(matches!(err, CliError::CommandMismatch { .. }));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"command":"detect","wibble":1}"#).unwrap();
        let err = parse_config(args(&[
            "detect", "--history", "h", "--input", "i", "--out", "o",
            "--config", path.to_str().unwrap(),
        ]))
        .unwrap_err();
        assert!(matches!(err, CliError::BadConfig { .. }));
    }

    #[test]
    fn missing_required_paths_are_reported() {
        let err = parse_config(args(&["detect", "--history", "h.csv"])).unwrap_err();
        assert!(err.to_string().contains("--input"), "{err}");
    }

    #[test]
    fn csv_rows_index_sequentially_and_min_count_filters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("counts.csv");
        std::fs::write(&path, "5, 10, 200\n1, 1, 1\n90, 80, 70\n").unwrap();
        let obs =
            read_observations(path.to_str().unwrap(), None, 7, Some(100)).unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].index, 7);
        assert_eq!(obs[1].index, 8);
        assert_eq!(obs[0].payload.as_vector().unwrap(), &[5.0, 10.0, 200.0]);
    }

    #[test]
    fn csv_garbage_reports_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "1.0,2.0\n3.0,oops\n").unwrap();
        let err = read_observations(path.to_str().unwrap(), None, 1, None).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn jsonl_keeps_indices_and_rejects_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.jsonl");
        std::fs::write(
            &path,
            "{\"index\":41,\"vector\":[1.0,2.0]}\n{\"index\":42,\"key\":\"a\"}\n",
        )
        .unwrap();
        let obs = read_observations(path.to_str().unwrap(), None, 1, None).unwrap();
        assert_eq!(obs[0].index, 41);
        assert_eq!(obs[1].index, 42);

        std::fs::write(
            &path,
            "{\"index\":1,\"vector\":[1.0]}\n{\"index\":3,\"vector\":[1.0]}\n",
        )
        .unwrap();
        let err = read_observations(path.to_str().unwrap(), None, 1, None).unwrap_err();
        assert!(err.to_string().contains("does not follow"), "{err}");
    }

    #[test]
    fn precomputed_metric_needs_its_table() {
        let (cfg, _) = parse_config(args(&[
            "functionals", "--history", "h.csv", "--metric", "precomputed",
        ]))
        .unwrap();
        assert!(matches!(resolve_metric(&cfg), Err(CliError::MetricNeedsTable)));
    }

    #[test]
    fn detect_runs_end_to_end_and_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let hist = dir.path().join("hist.csv");
        let stream = dir.path().join("stream.csv");
        // 40 null rows, then a strong shift, under a small window.
        write_gaussian_csv(&hist, 40, 2, 11, 0.0);
        write_gaussian_csv(&stream, 60, 2, 12, 6.0);

        // Both runs write to the same paths, so the bytes must coincide.
        let events = dir.path().join("events.jsonl");
        let zmax = dir.path().join("zmax.tsv");
        let run_once = || -> (String, String) {
            let code = main_entry(args(&[
                "detect",
                "--history", hist.to_str().unwrap(),
                "--input", stream.to_str().unwrap(),
                "--out", events.to_str().unwrap(),
                "--emit-zmax", zmax.to_str().unwrap(),
                "--window", "20", "--k", "2", "--n0", "3", "--n1", "17",
                "--threshold", "3.5",
            ]))
            .unwrap();
            assert_eq!(code, 0);
            (
                std::fs::read_to_string(&events).unwrap(),
                std::fs::read_to_string(&zmax).unwrap(),
            )
        };
        let (ev1, zm1) = run_once();
        let (ev2, zm2) = run_once();
        assert_eq!(ev1, ev2);
        assert_eq!(zm1, zm2);

        let mut lines = ev1.lines();
        let head: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
        assert_eq!(head["schema"], "knnscan.events.v1");
        assert!(head["sha256"]["history"].is_string());
        let first_event: serde_json::Value =
            serde_json::from_str(lines.next().expect("the shift fires")).unwrap();
        assert_eq!(first_event["rule"], "t3");
        assert_eq!(first_event["status"], "valid");
        assert!(first_event["n"].as_u64().unwrap() > 40);
        assert!(first_event["zmax"].as_f64().unwrap() > 3.5);
    }

    #[test]
    fn stop_on_detect_exits_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let hist = dir.path().join("hist.csv");
        let stream = dir.path().join("stream.csv");
        write_gaussian_csv(&hist, 40, 2, 21, 0.0);
        write_gaussian_csv(&stream, 60, 2, 22, 6.0);
        let events = dir.path().join("events.jsonl");
        let code = main_entry(args(&[
            "detect",
            "--history", hist.to_str().unwrap(),
            "--input", stream.to_str().unwrap(),
            "--out", events.to_str().unwrap(),
            "--window", "20", "--k", "2", "--n0", "3", "--n1", "17",
            "--threshold", "3.5", "--stop-on-detect",
        ]))
        .unwrap();
        assert_eq!(code, 2);
        let text = std::fs::read_to_string(&events).unwrap();
        // Provenance plus exactly one event: the run stopped there.
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn empty_stream_exits_cleanly_with_zero_events() {
        let dir = tempfile::tempdir().unwrap();
        let hist = dir.path().join("hist.csv");
        let stream = dir.path().join("stream.csv");
        write_gaussian_csv(&hist, 40, 2, 31, 0.0);
        std::fs::write(&stream, "").unwrap();
        let events = dir.path().join("events.jsonl");
        let code = main_entry(args(&[
            "detect",
            "--history", hist.to_str().unwrap(),
            "--input", stream.to_str().unwrap(),
            "--out", events.to_str().unwrap(),
            "--window", "20", "--k", "1", "--n0", "3", "--n1", "17",
            "--threshold", "4.0",
        ]))
        .unwrap();
        assert_eq!(code, 0);
        let text = std::fs::read_to_string(&events).unwrap();
        assert_eq!(text.lines().count(), 1, "provenance only");
    }

    #[test]
    fn twosample_reports_a_shift() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        write_gaussian_csv(&a, 30, 3, 41, 0.0);
        write_gaussian_csv(&b, 30, 3, 42, 3.0);
        let out = dir.path().join("two.json");
        let code = main_entry(args(&[
            "twosample",
            "--input-a", a.to_str().unwrap(),
            "--input-b", b.to_str().unwrap(),
            "--k", "3",
            "--permutations", "200",
            "--seed", "7",
            "--out", out.to_str().unwrap(),
        ]))
        .unwrap();
        assert_eq!(code, 0);
        let mut text = String::new();
        File::open(&out).unwrap().read_to_string(&mut text).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["schema"], "knnscan.twosample.v1");
        assert!(v["z"].as_f64().unwrap() > 3.0, "separated samples: {}", v["z"]);
        assert!(v["p_value"].as_f64().unwrap() < 0.05);
    }

    #[test]
    fn functionals_and_calibrate_share_the_history_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let hist = dir.path().join("hist.csv");
        write_gaussian_csv(&hist, 120, 3, 51, 0.0);
        let out = dir.path().join("cal.json");
        let code = main_entry(args(&[
            "calibrate",
            "--history", hist.to_str().unwrap(),
            "--window", "50", "--k", "1", "--n0", "3", "--n1", "47",
            "--target-arl", "10000",
            "--out", out.to_str().unwrap(),
        ]))
        .unwrap();
        assert_eq!(code, 0);
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["schema"], "knnscan.calibrate.v1");
        // Both solves must land inside the bisection bracket and disagree;
        // which one is larger depends on the sampled motif rates, so the
        // direction is pinned elsewhere against long reference histories.
        let asym = v["threshold_asymptotic"].as_f64().unwrap();
        let corr = v["threshold_corrected"].as_f64().unwrap();
        assert!(asym > 1.0 && asym < 10.0);
        assert!(corr > 1.0 && corr < 10.0);
        assert!((corr - asym).abs() > 1e-6, "the correction must do something");
        assert_eq!(v["estimates"]["windows"].as_u64().unwrap(), 71);
    }
}
