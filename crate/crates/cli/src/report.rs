//! Report rows `(experiment, direction, metric, value, seed)` and the
//! aggregated views built from them.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Value {
    Num(f64),
    /// The system behind this cell did not finish (e.g. diverged).
    Failed,
}

impl Value {
    pub fn num(self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(v),
            Value::Failed => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) => write!(f, "{v}"),
            Value::Failed => f.write_str("failed"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// `<experiment name>/<system>`.
    pub experiment: String,
    pub direction: String,
    pub metric: String,
    pub value: Value,
    pub seed: Option<u64>,
}

impl ReportRow {
    pub fn new(experiment: impl Into<String>, direction: impl Into<String>, metric: impl Into<String>, value: Value, seed: Option<u64>) -> Self {
        Self {
            experiment: experiment.into(),
            direction: direction.into(),
            metric: metric.into(),
            value,
            seed,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Eval(format!("{}: {other:?}", path.display())),
    }
}

fn write_records(path: &Path, header: &[String], records: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn report_to_records(rows: &[ReportRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.experiment.clone(),
                r.direction.clone(),
                r.metric.clone(),
                r.value.to_string(),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
            ]
        })
        .collect()
}

pub const REPORT_HEADER: [&str; 5] = ["experiment", "direction", "metric", "value", "seed"];

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    write_records(path, &REPORT_HEADER.map(String::from), &report_to_records(rows))
}

/// The report as CSV text (for stdout).
pub fn report_string(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).expect("in-memory write");
    for r in report_to_records(rows) {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Across-seed aggregate of one `(experiment, direction, metric)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub experiment: String,
    pub direction: String,
    pub metric: String,
    pub median: f64,
    pub mean: f64,
    pub n: usize,
    pub failed: usize,
}

/// Groups rows by cell in order of first appearance.
pub fn summarize(rows: &[ReportRow]) -> Vec<Summary> {
    let mut keys: Vec<(&str, &str, &str)> = Vec::new();
    let mut seen = BTreeSet::new();
    for r in rows {
        let k = (r.experiment.as_str(), r.direction.as_str(), r.metric.as_str());
        if seen.insert(k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(e, d, m)| {
            let cell: Vec<&ReportRow> = rows.iter().filter(|r| r.experiment == e && r.direction == d && r.metric == m).collect();
            let ok: Vec<f64> = cell.iter().filter_map(|r| r.value.num()).collect();
            Summary {
                experiment: e.to_string(),
                direction: d.to_string(),
                metric: m.to_string(),
                median: median(&ok),
                mean: mean(&ok),
                n: ok.len(),
                failed: cell.len() - ok.len(),
            }
        })
        .collect()
}

pub fn write_summary(path: &Path, summary: &[Summary]) -> Result<()> {
    let header = ["experiment", "direction", "metric", "median", "mean", "n", "failed"].map(String::from);
    let records: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.experiment.clone(),
                s.direction.clone(),
                s.metric.clone(),
                s.median.to_string(),
                s.mean.to_string(),
                s.n.to_string(),
                s.failed.to_string(),
            ]
        })
        .collect();
    write_records(path, &header, &records)
}

pub fn find<'a>(summary: &'a [Summary], experiment: &str, direction: &str, metric: &str) -> Option<&'a Summary> {
    summary
        .iter()
        .find(|s| s.experiment == experiment && s.direction == direction && s.metric == metric)
}

fn unique<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    it.filter(|x| seen.insert(*x)).collect()
}

/// One markdown table per metric: systems down, directions across, medians
/// to one decimal ("–" for cells with no finished run).
pub fn markdown_tables(title: &str, summary: &[Summary]) -> String {
    let mut out = format!("# {title}\n\nMedian over seeds.\n");
    for metric in unique(summary.iter().map(|s| s.metric.as_str())) {
        let cells: Vec<&Summary> = summary.iter().filter(|s| s.metric == metric).collect();
        let systems = unique(cells.iter().map(|s| s.experiment.as_str()));
        let dirs = unique(cells.iter().map(|s| s.direction.as_str()));
        out.push_str(&format!("\n## {metric}\n\n| system | {} |\n|---|{}\n", dirs.join(" | "), "---|".repeat(dirs.len())));
        for sys in systems {
            let vals: Vec<String> = dirs
                .iter()
                .map(|d| match cells.iter().find(|s| s.experiment == sys && s.direction == *d) {
                    Some(s) if s.n > 0 => format!("{:.1}", s.median),
                    _ => "–".to_string(),
                })
                .collect();
            out.push_str(&format!("| {sys} | {} |\n", vals.join(" | ")));
        }
    }
    out
}

/// Wide CSV of medians: one row per `(experiment, direction)`, one column per
/// metric in `metrics` (column headers from `label`).
pub fn write_wide(path: &Path, summary: &[Summary], metrics: &[String], label: impl Fn(&str) -> String) -> Result<()> {
    let mut header = vec!["experiment".to_string(), "direction".to_string()];
    header.extend(metrics.iter().map(|m| label(m)));
    let keys = {
        let mut seen = BTreeSet::new();
        summary
            .iter()
            .filter(|s| metrics.contains(&s.metric))
            .map(|s| (s.experiment.clone(), s.direction.clone()))
            .filter(|k| seen.insert(k.clone()))
            .collect::<Vec<_>>()
    };
    let records: Vec<Vec<String>> = keys
        .into_iter()
        .map(|(e, d)| {
            let mut r = vec![e.clone(), d.clone()];
            r.extend(metrics.iter().map(|m| find(summary, &e, &d, m).map(|s| s.median.to_string()).unwrap_or_default()));
            r
        })
        .collect();
    write_records(path, &header, &records)
}
