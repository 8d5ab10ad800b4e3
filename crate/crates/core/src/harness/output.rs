//! Trace export: full JSONL traces and a one-line CSV summary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::sim::{MetricsTrace, StepRecord};

pub const RESOLVED_FILE: &str = "resolved.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const SUMMARY_HEADER: [&str; 4] = [
    "final_loss",
    "min_loss",
    "final_grad_norm_sq",
    "final_consensus_distance",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Jsonl,
    Csv,
    #[default]
    Both,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(OutputFormat::Jsonl),
            "csv" => Ok(OutputFormat::Csv),
            "both" => Ok(OutputFormat::Both),
            other => Err(Error::config(format!("unknown format {other:?} (jsonl, csv or both)"))),
        }
    }
}

impl OutputFormat {
    fn jsonl(self) -> bool {
        matches!(self, OutputFormat::Jsonl | OutputFormat::Both)
    }

    fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_loss: f64,
    pub min_loss: f64,
    pub final_grad_norm_sq: f64,
    pub final_consensus_distance: f64,
}

pub fn summarize(trace: &MetricsTrace) -> Option<Summary> {
    let last = trace.final_record()?;
    Some(Summary {
        final_loss: last.loss,
        min_loss: trace.records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min),
        final_grad_norm_sq: last.grad_norm_sq,
        final_consensus_distance: last.consensus_distance,
    })
}

/// One JSON object per record, newline terminated.
pub fn to_jsonl(trace: &MetricsTrace) -> String {
    let mut out = String::new();
    for r in &trace.records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<MetricsTrace> {
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<StepRecord>(l)
                .map_err(|e| Error::config(format!("trace line {}: {e}", i + 1)))
        })
        .collect::<Result<_>>()?;
    Ok(MetricsTrace { records })
}

pub fn read_jsonl(path: &Path) -> Result<MetricsTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text).map_err(|e| match e {
        Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_jsonl(trace: &MetricsTrace, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(trace).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Summary CSV; a trace without records yields just the header.
pub fn write_summary_csv(trace: &MetricsTrace, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err)?;
    if let Some(s) = summarize(trace) {
        w.write_record([
            s.final_loss.to_string(),
            s.min_loss.to_string(),
            s.final_grad_norm_sq.to_string(),
            s.final_consensus_distance.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary_csv(path: &Path) -> Result<Option<Summary>> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    match r.deserialize().next() {
        Some(row) => Ok(Some(row.map_err(csv_err)?)),
        None => Ok(None),
    }
}

/// Paths written by [`write_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunFiles {
    pub resolved: PathBuf,
    pub trace: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

/// Writes `resolved.json` and, depending on `format`, `trace.jsonl` and
/// `summary.csv` into `dir` (created if missing).
pub fn write_run(dir: &Path, config: &ExperimentConfig, trace: &MetricsTrace, format: OutputFormat) -> Result<RunFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = dir.join(RESOLVED_FILE);
    fs::write(&resolved, config.resolved_json() + "\n").map_err(|e| Error::io(&resolved, e))?;
    let mut files = RunFiles {
        resolved,
        trace: None,
        summary: None,
    };
    if format.jsonl() {
        let p = dir.join(TRACE_FILE);
        write_jsonl(trace, &p)?;
        files.trace = Some(p);
    }
    if format.csv() {
        let p = dir.join(SUMMARY_FILE);
        write_summary_csv(trace, &p)?;
        files.summary = Some(p);
    }
    Ok(files)
}
