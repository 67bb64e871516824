//! Line-delimited metrics: one flat JSON object per line.
//!
//! A metrics file has a single writer. Appending from two processes at
//! once is outside the contract and may interleave partial lines.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<f64> for MetricValue {
    fn from(v: f64) -> Self {
        MetricValue::Float(v)
    }
}

impl From<usize> for MetricValue {
    fn from(v: usize) -> Self {
        MetricValue::Int(v as i64)
    }
}

impl From<bool> for MetricValue {
    fn from(v: bool) -> Self {
        MetricValue::Bool(v)
    }
}

impl From<&str> for MetricValue {
    fn from(v: &str) -> Self {
        MetricValue::Text(v.to_string())
    }
}

impl MetricValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            MetricValue::Int(i) => Some(i as f64),
            MetricValue::Float(f) => Some(f),
            _ => None,
        }
    }
}

pub type MetricsRecord = BTreeMap<String, MetricValue>;

/// Builds a record from `(key, value)` pairs.
pub fn record<const N: usize>(pairs: [(&str, MetricValue); N]) -> MetricsRecord {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn encode_line(rec: &MetricsRecord, index: usize) -> Result<String> {
    if let Some((k, _)) = rec.iter().find(|(_, v)| matches!(v, MetricValue::Float(f) if !f.is_finite())) {
        return Err(Error::MalformedMetrics { line: index + 1, message: format!("`{k}` is not finite") });
    }
    Ok(serde_json::to_string(rec).expect("flat map serialises"))
}

/// Appending writer; each record is flushed as one complete line.
pub struct MetricsWriter {
    out: BufWriter<File>,
    written: usize,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsWriter { out: BufWriter::new(file), written: 0 })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        let line = encode_line(rec, self.written)?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        self.written += 1;
        Ok(())
    }
}

/// Writes `records` to a fresh file, replacing any previous content.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let lines = records
        .iter()
        .enumerate()
        .map(|(i, r)| encode_line(r, i).map(|l| l + "\n"))
        .collect::<Result<String>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, lines)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedMetrics { line: i + 1, message: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}
