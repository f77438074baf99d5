//! Read-only reduction of completed runs into comparison tables.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::experiment::MetricsReport;
use super::io::{read_json, write_csv};

/// `(median, min, max)`; the median of an even count is the mean of the two
/// middle values.
pub fn summarize(values: &[f64]) -> Result<(f64, f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("summarize"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    Ok((median, v[0], v[n - 1]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub key: String,
    /// Distinct config hashes of the row's runs, joined by `+`.
    pub config_hash: String,
    /// Primary metric per seed, in the table's seed order; `None` where the
    /// row has no run for that seed.
    pub values: Vec<Option<f64>>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub task: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

/// Groups reports by `pipeline/variant` (in order of first appearance).
/// Reports for different tasks or metrics cannot share a table.
pub fn compare(reports: &[MetricsReport]) -> Result<ComparisonTable> {
    let first = reports.first().ok_or(Error::EmptyInput("report"))?;
    for r in reports {
        if r.task != first.task {
            return Err(Error::IncompatibleRuns(format!(
                "runs mix tasks `{}` ({}) and `{}` ({})",
                first.task,
                first.key(),
                r.task,
                r.key()
            )));
        }
        if r.primary_name != first.primary_name {
            return Err(Error::IncompatibleRuns(format!(
                "runs report different metrics `{}` and `{}`",
                first.primary_name, r.primary_name
            )));
        }
    }
    let seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect::<BTreeSet<_>>().into_iter().collect();
    let mut keys: Vec<String> = Vec::new();
    for r in reports {
        if !keys.contains(&r.key()) {
            keys.push(r.key());
        }
    }
    let mut rows = Vec::with_capacity(keys.len());
    for key in keys {
        let mine: Vec<&MetricsReport> = reports.iter().filter(|r| r.key() == key).collect();
        let mut values = vec![None; seeds.len()];
        for r in &mine {
            let i = seeds.iter().position(|&s| s == r.seed).expect("seed collected above");
            if values[i].is_some() {
                return Err(Error::IncompatibleRuns(format!("duplicate run {key} seed {}", r.seed)));
            }
            values[i] = Some(r.primary);
        }
        let mut hashes: Vec<&str> = Vec::new();
        for r in &mine {
            if !hashes.contains(&r.config_hash.as_str()) {
                hashes.push(&r.config_hash);
            }
        }
        let present: Vec<f64> = values.iter().flatten().cloned().collect();
        let (median, min, max) = summarize(&present)?;
        rows.push(ComparisonRow { config_hash: hashes.join("+"), key, values, median, min, max });
    }
    Ok(ComparisonTable { task: first.task.to_string(), metric: first.primary_name.clone(), seeds, rows })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Left-aligned first column, right-aligned rest, rule under the header.
fn render(lines: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..lines[0].len()).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

impl ComparisonTable {
    /// Aligned plain-text rendering, values in percent.
    pub fn to_text(&self) -> String {
        let mut header = vec!["run".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed {s}")));
        header.extend(["median".into(), "min".into(), "max".into()]);
        let mut lines = vec![header];
        for r in &self.rows {
            let mut line = vec![r.key.clone()];
            line.extend(r.values.iter().map(|v| v.map(pct).unwrap_or_else(|| "-".into())));
            line.extend([pct(r.median), pct(r.min), pct(r.max)]);
            lines.push(line);
        }
        format!("task: {}   metric: {} (%)\n{}", self.task, self.metric, render(&lines))
    }

    /// Transposed rendering with one column per `(run key, heading)`, in the
    /// given order, and one row per seed followed by median, min and max.
    pub fn to_columns(&self, columns: &[(&str, &str)]) -> Result<String> {
        let rows: Vec<&ComparisonRow> = columns
            .iter()
            .map(|(key, _)| {
                self.rows
                    .iter()
                    .find(|r| r.key == *key)
                    .ok_or_else(|| Error::IncompatibleRuns(format!("no run `{key}` in the table")))
            })
            .collect::<Result<_>>()?;
        let mut header = vec!["strategy".to_string()];
        header.extend(columns.iter().map(|(_, h)| h.to_string()));
        let mut lines = vec![header];
        for (i, s) in self.seeds.iter().enumerate() {
            let mut line = vec![format!("seed {s}")];
            line.extend(rows.iter().map(|r| r.values[i].map(pct).unwrap_or_else(|| "-".into())));
            lines.push(line);
        }
        for (name, pick) in [
            ("median", (|r: &ComparisonRow| r.median) as fn(&ComparisonRow) -> f64),
            ("min", |r| r.min),
            ("max", |r| r.max),
        ] {
            let mut line = vec![name.to_string()];
            line.extend(rows.iter().map(|r| pct(pick(r))));
            lines.push(line);
        }
        Ok(format!("task: {}   metric: {} (%)\n{}", self.task, self.metric, render(&lines)))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header: Vec<String> = vec!["run".into(), "config_hash".into()];
        header.extend(self.seeds.iter().map(|s| format!("seed_{s}")));
        header.extend(["median".into(), "min".into(), "max".into()]);
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.key.clone(), r.config_hash.clone()];
                row.extend(r.values.iter().map(|v| v.map(|x| format!("{x:e}")).unwrap_or_default()));
                row.extend([format!("{:e}", r.median), format!("{:e}", r.min), format!("{:e}", r.max)]);
                row
            })
            .collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let stamp = format!("task={} metric={} seeds={}", self.task, self.metric, seeds.join(","));
        write_csv(path, &stamp, &header, &rows)
    }
}

fn collect_metrics(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        if path.file_name().is_some_and(|n| n == "metrics.json") {
            out.push(path.to_path_buf());
        }
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for e in entries {
        collect_metrics(&e, out)?;
    }
    Ok(())
}

/// Loads every `metrics.json` under the given files or directories.
pub fn load_reports(paths: &[PathBuf]) -> Result<Vec<MetricsReport>> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        collect_metrics(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::EmptyInput("report: no completed runs found"));
    }
    files.iter().map(|f| read_json(f)).collect()
}
