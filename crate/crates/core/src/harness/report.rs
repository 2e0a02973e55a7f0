//! Summaries of finished runs read back from their metrics files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::metrics::{format_float, read_metrics, tail_mean, violation_count, MetricsRow};
use super::sweep::TAIL_EPOCHS;
use crate::error::{Error, Result};

pub const REPORT_HEADER: &str = "run,epochs,violations,violation_fraction,tail_return,tail_cost,max_kl";

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run: String,
    pub epochs: usize,
    pub violations: usize,
    pub tail_return: f64,
    /// Last-epochs mean of the first constraint's discounted cost.
    pub tail_cost: f64,
    pub max_kl: f64,
}

impl RunSummary {
    pub fn from_rows(run: String, rows: &[MetricsRow]) -> Self {
        RunSummary {
            run,
            epochs: rows.len(),
            violations: violation_count(rows),
            tail_return: tail_mean(rows, TAIL_EPOCHS, |r| r.undiscounted_return),
            tail_cost: tail_mean(rows, TAIL_EPOCHS, |r| r.discounted_cost[0]),
            max_kl: rows.iter().map(|r| r.kl_after).fold(0.0, f64::max),
        }
    }

    pub fn violation_fraction(&self) -> f64 {
        if self.epochs == 0 {
            return f64::NAN;
        }
        self.violations as f64 / self.epochs as f64
    }
}

/// Every file named `metrics.csv` under `root` (or `root` itself if it is
/// a file), sorted by path.
pub fn find_metrics(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "metrics.csv") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Summarizes each metrics file. Runs are named by their directory
/// relative to `root`.
pub fn summarize(root: &Path) -> Result<Vec<RunSummary>> {
    let files = find_metrics(root)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no metrics.csv under {}", root.display())));
    }
    files
        .iter()
        .map(|f| {
            let dir = f.parent().unwrap_or(Path::new(""));
            let name = dir.strip_prefix(root).unwrap_or(dir).display().to_string();
            let name = if name.is_empty() { ".".to_string() } else { name };
            Ok(RunSummary::from_rows(name, &read_metrics(f)?))
        })
        .collect()
}

pub fn to_csv(summaries: &[RunSummary]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for s in summaries {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.run,
            s.epochs,
            s.violations,
            format_float(s.violation_fraction()),
            format_float(s.tail_return),
            format_float(s.tail_cost),
            format_float(s.max_kl)
        )
        .unwrap();
    }
    out
}
