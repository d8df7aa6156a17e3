use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::CELossBreakdown;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub step_or_epoch: u64,
    pub loss: f64,
    pub invariance_term: Option<f64>,
    pub redundancy_term: Option<f64>,
    pub lambda: Option<f64>,
    pub wall_ms: Option<u64>,
}

impl MetricRecord {
    pub fn translation(stage: &str, step: u64, loss: f64) -> Self {
        Self {
            stage: stage.to_string(),
            step_or_epoch: step,
            loss,
            invariance_term: None,
            redundancy_term: None,
            lambda: None,
            wall_ms: None,
        }
    }

    pub fn ce(epoch: u64, b: &CELossBreakdown) -> Self {
        Self {
            stage: "ce".to_string(),
            step_or_epoch: epoch,
            loss: b.total,
            invariance_term: Some(b.invariance_term),
            redundancy_term: Some(b.redundancy_term),
            lambda: Some(b.lambda),
            wall_ms: None,
        }
    }
}

/// Receives metric records in step order.
pub trait MetricsSink {
    fn record(&mut self, record: MetricRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricRecord> {
    fn record(&mut self, record: MetricRecord) -> Result<()> {
        self.push(record);
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: MetricRecord) -> Result<()> {
        Ok(())
    }
}

/// Appends records as JSON lines. Wall-clock timing is off by default so
/// that fixed-seed runs produce byte-identical logs.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
    clock: Option<Instant>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            clock: None,
        })
    }

    /// Fills `wall_ms` with milliseconds since this call.
    pub fn with_wall_clock(mut self) -> Self {
        self.clock = Some(Instant::now());
        self
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl MetricsSink for JsonlWriter {
    fn record(&mut self, mut record: MetricRecord) -> Result<()> {
        if let Some(t) = self.clock {
            record.wall_ms = Some(t.elapsed().as_millis() as u64);
        }
        let line = serde_json::to_string(&record).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        {
            let mut w = JsonlWriter::create(&path).unwrap();
            w.record(MetricRecord::translation("pretrain", 1, 2.5)).unwrap();
            let b = CELossBreakdown {
                total: 1.0,
                invariance_term: 0.5,
                redundancy_term: 100.0,
                lambda: 5e-3,
            };
            w.record(MetricRecord::ce(1, &b)).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["stage"], "pretrain");
        assert!(lines[0]["invariance_term"].is_null());
        assert!(lines[0]["wall_ms"].is_null());
        assert_eq!(lines[1]["redundancy_term"], 100.0);
        for key in [
            "stage",
            "step_or_epoch",
            "loss",
            "invariance_term",
            "redundancy_term",
            "lambda",
            "wall_ms",
        ] {
            assert!(lines[1].get(key).is_some(), "{key}");
        }
    }
}
