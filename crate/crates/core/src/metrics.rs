//! Line-delimited JSON training log.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss_gg: f64,
    pub loss_lg: f64,
    pub loss_ll: f64,
    /// Regressor objective before its update; absent without a learned measure.
    pub omega: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: u64,
    pub epoch: u64,
    pub knn_top1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step(StepMetrics),
    Eval(EvalMetrics),
}

pub trait MetricsSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricRecord> {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        self.push(*rec);
        Ok(())
    }
}

/// Appends one JSON object per record and flushes after each line.
pub struct JsonLinesSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLinesSink {
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }
}

impl MetricsSink for JsonLinesSink {
    fn record(&mut self, rec: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("metric records serialize");
        writeln!(self.out, "{line}").map_err(io_err(&self.path))?;
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Parses a log, returning the records plus one warning per skipped line.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<(Vec<MetricRecord>, Vec<String>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(r) => records.push(r),
            Err(e) => warnings.push(format!("{}:{}: skipped malformed record ({e})", path.display(), i + 1)),
        }
    }
    Ok((records, warnings))
}

/// `(step, knn_top1)` points of a log, in file order.
pub fn knn_curve(records: &[MetricRecord]) -> Vec<(u64, f64)> {
    records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Eval(e) => Some((e.step, e.knn_top1)),
            MetricRecord::Step(_) => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_skip_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let recs = [
            MetricRecord::Step(StepMetrics {
                step: 1,
                epoch: 0,
                lr: 0.03,
                loss_gg: 1.5,
                loss_lg: 6.0,
                loss_ll: 0.7,
                omega: Some(0.01),
                total: 7.5,
            }),
            MetricRecord::Eval(EvalMetrics {
                step: 1,
                epoch: 1,
                knn_top1: 0.123456789,
            }),
        ];
        {
            let mut s = JsonLinesSink::append(&p).unwrap();
            for r in &recs {
                s.record(r).unwrap();
            }
        }
        std::fs::OpenOptions::new()
            .append(true)
            .open(&p)
            .unwrap()
            .write_all(b"{not json\n")
            .unwrap();
        let (back, warn) = read_metrics(&p).unwrap();
        assert_eq!(back, recs);
        assert_eq!(warn.len(), 1);
        assert_eq!(knn_curve(&back), vec![(1, 0.123456789)]);
    }
}
