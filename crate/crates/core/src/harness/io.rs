//! Versioned on-disk formats: JSON documents, CSV tables with a leading
//! `# format_version=N <stamp>` line, and model checkpoints.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::classifier::EpochMetric;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    #[derive(Deserialize)]
    struct Versioned {
        format_version: u32,
    }
    let v: Versioned = serde_json::from_str(&text)?;
    if v.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersion {
            what: path.display().to_string(),
            found: v.format_version,
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_str(&text)?)
}

/// All parameter tensors (with shapes) and the configuration that built
/// them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: M,
}

pub fn write_checkpoint<M: Serialize>(path: &Path, kind: &str, config_hash: &str, seed: u64, model: &M) -> Result<()> {
    #[derive(Serialize)]
    struct Borrowed<'a, M> {
        format_version: u32,
        kind: &'a str,
        config_hash: &'a str,
        seed: u64,
        model: &'a M,
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    serde_json::to_writer(&mut w, &Borrowed { format_version: FORMAT_VERSION, kind, config_hash, seed, model })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<Checkpoint<M>> {
    let ckpt: Checkpoint<M> = read_json(path)?;
    if ckpt.kind != kind {
        return Err(Error::Parse {
            what: path.display().to_string(),
            msg: format!("checkpoint holds `{}`, expected `{kind}`", ckpt.kind),
        });
    }
    Ok(ckpt)
}

/// Provenance appended to a CSV version line.
pub fn stamp(config_hash: &str, seed: u64) -> String {
    format!("config_hash={config_hash} seed={seed}")
}

fn csv_file(path: &Path, stamp: &str) -> Result<csv::Writer<std::fs::File>> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "# format_version={FORMAT_VERSION} {stamp}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `header` and `rows` as CSV after the version line.
pub fn write_csv(path: &Path, stamp: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_file(path, stamp)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_epoch_csv(path: &Path, stamp: &str, epochs: &[EpochMetric]) -> Result<()> {
    let rows: Vec<Vec<String>> = epochs
        .iter()
        .map(|e| vec![e.epoch.to_string(), format!("{:e}", e.train_loss), e.metric.clone(), format!("{:e}", e.value)])
        .collect();
    write_csv(path, stamp, &["epoch", "train_loss", "metric", "value"], &rows)
}

/// Reads a versioned CSV, returning header and records.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let found = first
        .strip_prefix("# format_version=")
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse::<u32>().ok())
        .ok_or_else(|| Error::Parse { what: path.display().to_string(), msg: "missing format_version line".into() })?;
    if found != FORMAT_VERSION {
        return Err(Error::FormatVersion { what: path.display().to_string(), found, expected: FORMAT_VERSION });
    }
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}
