//! Per-minibatch training records and their CSV form.
//!
//! `runlog.csv` columns, in order:
//!
//! ```text
//! version, minibatch, train_loss, train_accuracy, valid_loss, valid_accuracy,
//! trace_elements, cos_layer_1 … cos_layer_L, cos_model, cos_degenerate
//! ```
//!
//! `version` is [`RUNLOG_VERSION`] on every row. Missing values are empty
//! cells. `cos_degenerate` lists (`;`-separated, 1-based, `m` for the model
//! scope) the scopes where one operand had zero norm. Wall-clock time is
//! kept out of this file so that it stays byte-stable; it goes to
//! `timing.csv` (`minibatch, seconds`).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::snn::Network;
use crate::train::metrics::CosineReport;

pub const RUNLOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinibatchRecord {
    /// Number of optimizer minibatches completed, starting at 1.
    pub minibatch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: Option<f64>,
    pub valid_accuracy: Option<f64>,
    /// Gradient-engine state held per example.
    pub trace_elements: usize,
    pub cosine: Option<CosineReport>,
    pub seconds: f64,
}

/// Receives records and snapshots while a run progresses.
pub trait TrainObserver {
    fn record(&mut self, _record: &MinibatchRecord) -> Result<()> {
        Ok(())
    }

    /// `minibatch` 0 is the initial model.
    fn checkpoint(&mut self, _minibatch: usize, _net: &Network) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn csv_header(depth: usize) -> String {
    let mut cols = vec![
        "version".to_string(),
        "minibatch".into(),
        "train_loss".into(),
        "train_accuracy".into(),
        "valid_loss".into(),
        "valid_accuracy".into(),
        "trace_elements".into(),
    ];
    cols.extend((1..=depth).map(|l| format!("cos_layer_{l}")));
    cols.push("cos_model".into());
    cols.push("cos_degenerate".into());
    cols.join(",")
}

pub fn csv_row(depth: usize, r: &MinibatchRecord) -> String {
    let mut cells = vec![
        RUNLOG_VERSION.to_string(),
        r.minibatch.to_string(),
        r.train_loss.to_string(),
        r.train_accuracy.to_string(),
        opt(r.valid_loss),
        opt(r.valid_accuracy),
        r.trace_elements.to_string(),
    ];
    match &r.cosine {
        Some(c) => {
            cells.extend(c.per_layer.iter().map(|x| x.value.to_string()));
            cells.push(c.model.value.to_string());
            let mut flags: Vec<String> = c
                .per_layer
                .iter()
                .enumerate()
                .filter(|(_, x)| x.degenerate)
                .map(|(i, _)| (i + 1).to_string())
                .collect();
            if c.model.degenerate {
                flags.push("m".into());
            }
            cells.push(flags.join(";"));
        }
        None => cells.extend(std::iter::repeat_n(String::new(), depth + 2)),
    }
    cells.join(",")
}

struct CsvSink {
    depth: usize,
    runlog: BufWriter<File>,
    timing: BufWriter<File>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// In-memory record list, optionally mirrored to `runlog.csv` and
/// `timing.csv` in a directory. Every row is flushed as it is written.
#[derive(Default)]
pub struct RunLog {
    pub records: Vec<MinibatchRecord>,
    sink: Option<CsvSink>,
    dir: Option<std::path::PathBuf>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_csv(dir: impl AsRef<Path>, depth: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let mut runlog = create(&dir.join("runlog.csv"))?;
        let mut timing = create(&dir.join("timing.csv"))?;
        let io = |e| Error::io(dir, e);
        writeln!(runlog, "{}", csv_header(depth)).and_then(|_| runlog.flush()).map_err(io)?;
        writeln!(timing, "minibatch,seconds").and_then(|_| timing.flush()).map_err(io)?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(CsvSink { depth, runlog, timing }),
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn last(&self) -> Option<&MinibatchRecord> {
        self.records.last()
    }
}

impl TrainObserver for RunLog {
    fn record(&mut self, record: &MinibatchRecord) -> Result<()> {
        if let Some(s) = &mut self.sink {
            let dir = self.dir.as_deref().unwrap_or(Path::new("."));
            let io = |e| Error::io(dir, e);
            writeln!(s.runlog, "{}", csv_row(s.depth, record))
                .and_then(|_| s.runlog.flush())
                .map_err(io)?;
            writeln!(s.timing, "{},{:.6}", record.minibatch, record.seconds)
                .and_then(|_| s.timing.flush())
                .map_err(io)?;
        }
        self.records.push(record.clone());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::metrics::Cosine;

    fn rec(cos: bool) -> MinibatchRecord {
        MinibatchRecord {
            minibatch: 3,
            train_loss: 1.5,
            train_accuracy: 0.25,
            valid_loss: None,
            valid_accuracy: Some(0.5),
            trace_elements: 40,
            cosine: cos.then(|| CosineReport {
                per_layer: vec![
                    Cosine { value: 0.5, degenerate: false },
                    Cosine { value: 0.0, degenerate: true },
                ],
                model: Cosine { value: 0.25, degenerate: false },
            }),
            seconds: 0.1,
        }
    }

    #[test]
    fn row_shapes_match_header() {
        let cols = csv_header(2).split(',').count();
        assert_eq!(cols, 11);
        assert_eq!(csv_row(2, &rec(false)).split(',').count(), cols);
        assert_eq!(csv_row(2, &rec(true)), "1,3,1.5,0.25,,0.5,40,0.5,0,0.25,2");
    }

    #[test]
    fn csv_files_exclude_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = RunLog::with_csv(dir.path(), 2).unwrap();
        log.record(&rec(true)).unwrap();
        let text = std::fs::read_to_string(dir.path().join("runlog.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("0.1"));
        let timing = std::fs::read_to_string(dir.path().join("timing.csv")).unwrap();
        assert!(timing.ends_with("3,0.100000\n"));
        assert_eq!(log.records.len(), 1);
    }
}
