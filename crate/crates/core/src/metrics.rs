//! Newline-delimited JSON metrics: one `{"config": ...}` header followed by
//! one flat record per log point. Each line is flushed as it is written so a
//! killed run leaves a parseable file.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One log point. Loss fields stay `None` until the first update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMetricsRow {
    pub env_steps: u64,
    /// `None` in deterministic runs so files compare byte for byte.
    pub wall_seconds: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub mean_q: Option<f64>,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub eval_episode_len: f64,
}

/// Anything that consumes log rows as training proceeds.
pub trait MetricsSink: Send {
    fn record(&mut self, row: &TrainMetricsRow) -> Result<()>;
}

impl MetricsSink for Vec<TrainMetricsRow> {
    fn record(&mut self, row: &TrainMetricsRow) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Discards rows.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _row: &TrainMetricsRow) -> Result<()> {
        Ok(())
    }
}

pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    /// Creates (truncating) `path` and writes the header record.
    pub fn create(path: &Path, config: &Value) -> Result<Self> {
        let file = File::create(path)?;
        let mut w = Self { file };
        w.write_line(&serde_json::json!({ "config": config }))?;
        Ok(w)
    }

    fn write_line<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let mut line = serde_json::to_vec(record).map_err(|e| Error::Format(e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }
}

impl MetricsSink for MetricsWriter {
    fn record(&mut self, row: &TrainMetricsRow) -> Result<()> {
        self.write_line(row)
    }
}

/// Header config and rows of a metrics file. A trailing partial line (from
/// a process killed mid-write) is ignored.
pub fn read_metrics(path: &Path) -> Result<(Value, Vec<TrainMetricsRow>)> {
    let text = std::fs::read(path)?;
    let complete = match text.iter().rposition(|&b| b == b'\n') {
        Some(i) => &text[..=i],
        None => &text[..0],
    };
    let mut lines = BufReader::new(complete).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} has no header record", path.display())))??;
    let mut header: Value =
        serde_json::from_str(&header).map_err(|e| Error::Format(format!("header: {e}")))?;
    let config = header
        .get_mut("config")
        .map(Value::take)
        .ok_or_else(|| Error::Format("header record lacks a 'config' key".into()))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("record {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok((config, rows))
}
