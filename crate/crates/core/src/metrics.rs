//! Per-step training-dynamics records, window smoothing, and the JSONL stream.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 20;

/// One line of the metrics stream. Field order is the schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Mean verifier reward over the step's freshly sampled corpus groups.
    pub mean_reward: f64,
    pub mean_response_length: f64,
    pub mean_entropy: f64,
    /// Euclidean norm of the objective gradient handed to the optimizer.
    pub grad_norm: f64,
    pub objective_value: f64,
    pub kappa: f64,
    pub groups_removed: u64,
    pub bank_size: u64,
    pub bank_popped: u64,
    pub bank_pushed: u64,
    pub mask_retained: u64,
    pub batch_groups: u64,
    pub zero_update: bool,
    pub max_replay_count: u64,
    /// Mask-retained groups per cluster id.
    pub retained_by_cluster: Vec<u64>,
}

pub const FIELD_NAMES: [&str; 16] = [
    "step",
    "mean_reward",
    "mean_response_length",
    "mean_entropy",
    "grad_norm",
    "objective_value",
    "kappa",
    "groups_removed",
    "bank_size",
    "bank_popped",
    "bank_pushed",
    "mask_retained",
    "batch_groups",
    "zero_update",
    "max_replay_count",
    "retained_by_cluster",
];

/// Trailing mean over the last `min(window, i + 1)` points.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|i| {
            let w = &series[(i + 1).saturating_sub(window)..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// Trailing sample standard deviation over the same windows; 0 for a
/// single-point window.
pub fn rolling_std(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..series.len())
        .map(|i| {
            let w = &series[(i + 1).saturating_sub(window)..=i];
            if w.len() < 2 {
                return 0.0;
            }
            let n = w.len() as f64;
            let mean = w.iter().sum::<f64>() / n;
            (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect()
}

pub fn grad_norm(entries: &[f64]) -> f64 {
    entries.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Append-only JSONL writer, flushed after every record.
pub struct MetricsSink {
    path: PathBuf,
    file: File,
}

impl MetricsSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Opens an existing stream keeping only its first `keep` records.
    pub fn resume(path: &Path, keep: usize) -> Result<Self> {
        let existing = if path.exists() {
            read_metrics(path)?
        } else {
            Vec::new()
        };
        if existing.len() < keep {
            return Err(Error::Config(format!(
                "{}: has {} records, checkpoint expects {keep}",
                path.display(),
                existing.len()
            )));
        }
        let mut sink = Self::create(path)?;
        for m in &existing[..keep] {
            sink.emit(m)?;
        }
        drop(sink);
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn emit(&mut self, m: &StepMetrics) -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads every complete line of a metrics stream. A trailing partial line
/// (a writer mid-record) is skipped.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if !line.ends_with('\n') {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let m = serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        out.push(m);
    }
    Ok(out)
}
