//! Per-epoch metrics and their CSV encoding.
//!
//! Floats are written as `{:.16e}` (17 significant digits) so that files
//! round-trip exactly. Per-constraint columns hold `;`-separated values
//! when there is more than one constraint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 9] = [
    "epoch",
    "return",
    "cost_undisc",
    "cost_disc",
    "epsilon",
    "violated",
    "kl",
    "linesearch_steps",
    "backtracked",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub undiscounted_return: f64,
    pub undiscounted_cost: Vec<f64>,
    pub discounted_cost: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub violated: bool,
    pub kl_after: f64,
    pub linesearch_steps: usize,
    pub backtracked: bool,
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format_float(*v)).collect::<Vec<_>>().join(";")
}

fn split(field: &str) -> Result<Vec<f64>> {
    field
        .split(';')
        .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Config(format!("bad float `{v}`: {e}"))))
        .collect()
}

fn parse_flag(field: &str) -> Result<bool> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Config(format!("bad flag `{field}`"))),
    }
}

impl MetricsRow {
    pub fn to_record(&self) -> [String; 9] {
        [
            self.epoch.to_string(),
            format_float(self.undiscounted_return),
            join(&self.undiscounted_cost),
            join(&self.discounted_cost),
            join(&self.epsilon),
            u8::from(self.violated).to_string(),
            format_float(self.kl_after),
            self.linesearch_steps.to_string(),
            u8::from(self.backtracked).to_string(),
        ]
    }

    pub fn from_record(record: &csv::StringRecord) -> Result<Self> {
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Config(format!("expected {} columns, found {}", CSV_HEADER.len(), record.len())));
        }
        let int = |i: usize| record[i].parse::<usize>().map_err(|e| Error::Config(format!("bad integer `{}`: {e}", &record[i])));
        Ok(MetricsRow {
            epoch: int(0)?,
            undiscounted_return: split(&record[1])?[0],
            undiscounted_cost: split(&record[2])?,
            discounted_cost: split(&record[3])?,
            epsilon: split(&record[4])?,
            violated: parse_flag(&record[5])?,
            kl_after: split(&record[6])?[0],
            linesearch_steps: int(7)?,
            backtracked: parse_flag(&record[8])?,
        })
    }
}

/// Streams rows to a CSV file, flushing after each one.
pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        inner.write_record(CSV_HEADER)?;
        inner.flush()?;
        Ok(MetricsWriter { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.to_record())?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Renders rows as CSV text with the fixed header.
pub fn to_csv_string(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for r in rows {
        w.write_record(r.to_record()).expect("in-memory write");
    }
    w.flush().expect("in-memory write");
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("ascii output")
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Config(format!("{}: not a metrics file", path.display())));
    }
    r.records().map(|rec| MetricsRow::from_record(&rec?)).collect()
}

/// Fraction of rows whose behavior policy violated a constraint.
pub fn violation_fraction(rows: &[MetricsRow]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no metrics rows".into()));
    }
    Ok(violation_count(rows) as f64 / rows.len() as f64)
}

pub fn violation_count(rows: &[MetricsRow]) -> usize {
    rows.iter().filter(|r| r.violated).count()
}

/// Mean of `f` over the last `k` rows (all rows if fewer).
pub fn tail_mean(rows: &[MetricsRow], k: usize, f: impl Fn(&MetricsRow) -> f64) -> f64 {
    let tail = &rows[rows.len().saturating_sub(k)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
