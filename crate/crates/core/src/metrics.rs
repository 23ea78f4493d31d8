//! JSONL run logs and CSV tables derived from them.
//!
//! A log file starts with one header line
//! `{"config": {...}, "run_id": "...", "artifact_version": "..."}` followed by
//! one [`StepRecord`] object per line. Floats are written with shortest
//! round-trip precision, so CSV cells parse back to exactly the logged value.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub mean_response_len: f64,
    pub greedy_accuracy: f64,
    pub loss: f64,
    pub clip_token_frac: f64,
    pub clip_seq_frac: f64,
    pub min_clipped_frac: f64,
    pub wall_ms: u64,
}

pub const METRICS: [&str; 10] = [
    "step",
    "mean_reward",
    "mean_entropy",
    "mean_response_len",
    "greedy_accuracy",
    "loss",
    "clip_token_frac",
    "clip_seq_frac",
    "min_clipped_frac",
    "wall_ms",
];

/// A metric value keeping integer fields integral in text form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Int(u64),
    Float(f64),
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricValue::Int(v) => write!(f, "{v}"),
            MetricValue::Float(v) => write!(f, "{v:?}"),
        }
    }
}

impl StepRecord {
    pub fn metric(&self, name: &str) -> Result<MetricValue> {
        Ok(match name {
            "step" => MetricValue::Int(self.step),
            "mean_reward" => MetricValue::Float(self.mean_reward),
            "mean_entropy" => MetricValue::Float(self.mean_entropy),
            "mean_response_len" => MetricValue::Float(self.mean_response_len),
            "greedy_accuracy" => MetricValue::Float(self.greedy_accuracy),
            "loss" => MetricValue::Float(self.loss),
            "clip_token_frac" => MetricValue::Float(self.clip_token_frac),
            "clip_seq_frac" => MetricValue::Float(self.clip_seq_frac),
            "min_clipped_frac" => MetricValue::Float(self.min_clipped_frac),
            "wall_ms" => MetricValue::Int(self.wall_ms),
            _ => {
                return Err(Error::UnknownMetric {
                    name: name.to_string(),
                    valid: METRICS.iter().map(|s| s.to_string()).collect(),
                })
            }
        })
    }

    /// Names of fields holding non-finite values.
    pub fn non_finite_fields(&self) -> Vec<&'static str> {
        METRICS
            .iter()
            .filter(|name| match self.metric(name) {
                Ok(MetricValue::Float(v)) => !v.is_finite(),
                _ => false,
            })
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunHeader {
    pub config: serde_json::Value,
    pub run_id: String,
    pub artifact_version: String,
}

impl RunHeader {
    pub fn new(config: serde_json::Value, run_id: impl Into<String>) -> Self {
        Self {
            config,
            run_id: run_id.into(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub header: RunHeader,
    pub records: Vec<StepRecord>,
}

/// Creates (or truncates) a log file and writes its header line.
pub fn create_log(path: &Path, header: &RunHeader) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(header)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Appends one record as a JSON line and flushes it.
///
/// Records with non-finite fields are rejected before anything is written.
pub fn append_record(path: &Path, record: &StepRecord) -> Result<()> {
    let bad = record.non_finite_fields();
    if !bad.is_empty() {
        return Err(Error::InvalidRecord(format!(
            "non-finite fields: {}",
            bad.join(", ")
        )));
    }
    let has_header = std::fs::metadata(path)
        .map(|m| m.len() > 0)
        .map_err(|e| Error::io(path, e))?;
    if !has_header {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "log has no header line".into(),
        });
    }
    let mut file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record)?;
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

/// Parses a log from text. A final line without a trailing newline is an
/// interrupted write and is dropped.
pub fn parse_log(text: &str, path: &str) -> Result<RunLog> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_string(),
        line,
        message,
    };
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    let mut lines = complete.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| err(1, "empty log: missing header".into()))?;
    let header: RunHeader =
        serde_json::from_str(first).map_err(|e| err(1, format!("bad header: {e}")))?;
    let mut records: Vec<StepRecord> = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record: StepRecord =
            serde_json::from_str(line).map_err(|e| err(n, format!("bad record: {e}")))?;
        if let Some(prev) = records.last() {
            if record.step <= prev.step {
                return Err(err(
                    n,
                    format!("step {} does not follow step {}", record.step, prev.step),
                ));
            }
        }
        records.push(record);
    }
    Ok(RunLog { header, records })
}

pub fn read_log(path: &Path) -> Result<RunLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text, &path.display().to_string())
}

/// Reads a log, truncating a torn trailing line in place so appends resume
/// cleanly after a crash.
pub fn repair_log(path: &Path) -> Result<RunLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let keep = text.rfind('\n').map_or(0, |p| p + 1);
    if keep != text.len() {
        let file = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.set_len(keep as u64).map_err(|e| Error::io(path, e))?;
    }
    parse_log(&text[..keep], &path.display().to_string())
}

/// Drops records beyond `step`, rewriting the file.
pub fn truncate_log_after(path: &Path, step: u64) -> Result<RunLog> {
    let mut log = repair_log(path)?;
    log.records.retain(|r| r.step <= step);
    create_log(path, &log.header)?;
    for r in &log.records {
        append_record(path, r)?;
    }
    Ok(log)
}

fn column_names(logs: &[RunLog]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    logs.iter()
        .map(|log| {
            let n = seen.entry(&log.header.run_id).or_insert(0);
            *n += 1;
            if *n == 1 {
                log.header.run_id.clone()
            } else {
                format!("{}#{}", log.header.run_id, n)
            }
        })
        .collect()
}

/// Step-aligned table of `metrics` across runs: the union of steps as rows,
/// one column per (run, metric); missing cells are empty.
fn metric_table(logs: &[RunLog], metrics: &[&str]) -> Result<String> {
    for m in metrics {
        // Validate the name even when there are no records.
        StepRecord::metric(&placeholder_record(), m)?;
    }
    let names = column_names(logs);
    let steps: BTreeSet<u64> = logs
        .iter()
        .flat_map(|l| l.records.iter().map(|r| r.step))
        .collect();
    let by_step: Vec<BTreeMap<u64, &StepRecord>> = logs
        .iter()
        .map(|l| l.records.iter().map(|r| (r.step, r)).collect())
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string()];
    for name in &names {
        for m in metrics {
            if metrics.len() == 1 {
                header.push(name.clone());
            } else {
                header.push(format!("{name}:{m}"));
            }
        }
    }
    w.write_record(&header)?;
    for step in steps {
        let mut row = vec![step.to_string()];
        for table in &by_step {
            for m in metrics {
                row.push(match table.get(&step) {
                    Some(r) => r.metric(m)?.to_string(),
                    None => String::new(),
                });
            }
        }
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn placeholder_record() -> StepRecord {
    StepRecord {
        step: 0,
        mean_reward: 0.0,
        mean_entropy: 0.0,
        mean_response_len: 0.0,
        greedy_accuracy: 0.0,
        loss: 0.0,
        clip_token_frac: 0.0,
        clip_seq_frac: 0.0,
        min_clipped_frac: 0.0,
        wall_ms: 0,
    }
}

/// CSV of one metric: `step` plus one column per run.
pub fn compare_logs(logs: &[RunLog], metric: &str) -> Result<String> {
    metric_table(logs, &[metric])
}

pub fn compare_runs(log_paths: &[PathBuf], metric: &str) -> Result<String> {
    if log_paths.is_empty() {
        return Err(Error::Usage("compare_runs needs at least one log".into()));
    }
    let logs = log_paths
        .iter()
        .map(|p| read_log(p))
        .collect::<Result<Vec<_>>>()?;
    compare_logs(&logs, metric)
}

/// Plot panels written by [`emit_plot_data`].
pub const PLOT_FILES: [(&str, &[&str]); 4] = [
    ("entropy.csv", &["mean_entropy"]),
    ("response_len.csv", &["mean_response_len"]),
    ("accuracy.csv", &["greedy_accuracy"]),
    (
        "clip_fractions.csv",
        &["clip_token_frac", "clip_seq_frac", "min_clipped_frac"],
    ),
];

/// Writes one CSV per figure panel into `out_dir` and returns their paths.
pub fn emit_plot_data(log_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let logs = log_paths
        .iter()
        .map(|p| read_log(p))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (file, metrics) in PLOT_FILES {
        let path = out_dir.join(file);
        let table = metric_table(&logs, metrics)?;
        std::fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
