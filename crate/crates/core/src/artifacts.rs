//! Run directory layout and the per-epoch training logs.
//!
//! ```text
//! <run>/run.meta                resolved configuration + meta.* lines
//! <run>/metrics.csv             one row per epoch
//! <run>/timing.csv              epoch,seconds
//! <run>/checkpoints/epoch_NNNN.ckpt, final.ckpt
//! <run>/invariance.csv          written by eval
//! <run>/invariance_summary.csv  written by eval
//! <run>/eval.meta               written by eval
//! ```
//!
//! `metrics.csv` columns, in order: `epoch`, `learning_rate`,
//! `cross_entropy`, `total_loss`, `train_accuracy`, `degenerate_skips`, then
//! `inv_conv<l>` for each configured invariance layer (empty when no value
//! was produced). Wall-clock time lives in `timing.csv` so that the metrics
//! file is bit-identical across repeated runs.

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::trainer::EpochLog;

pub const RUN_META: &str = "run.meta";
pub const METRICS: &str = "metrics.csv";
pub const TIMING: &str = "timing.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const INVARIANCE: &str = "invariance.csv";
pub const INVARIANCE_SUMMARY: &str = "invariance_summary.csv";
pub const EVAL_META: &str = "eval.meta";

pub const METRICS_FIXED_COLUMNS: [&str; 6] =
    ["epoch", "learning_rate", "cross_entropy", "total_loss", "train_accuracy", "degenerate_skips"];

pub fn epoch_checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

pub fn final_checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT)
}

pub fn metrics_header(inv_layers: &[usize]) -> Vec<String> {
    METRICS_FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(inv_layers.iter().map(|l| format!("inv_conv{l}")))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Appends rows to `metrics.csv` and `timing.csv`, flushing after each epoch.
pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timing: csv::Writer<File>,
    layers: usize,
}

impl MetricsWriter {
    pub fn create(run_dir: &Path, inv_layers: &[usize]) -> Result<Self> {
        let mut metrics = csv::Writer::from_path(run_dir.join(METRICS))?;
        metrics.write_record(metrics_header(inv_layers))?;
        let mut timing = csv::Writer::from_path(run_dir.join(TIMING))?;
        timing.write_record(["epoch", "seconds"])?;
        let mut w = MetricsWriter { metrics, timing, layers: inv_layers.len() };
        w.flush(run_dir)?;
        Ok(w)
    }

    pub fn append(&mut self, log: &EpochLog, run_dir: &Path) -> Result<()> {
        if log.inv_losses.len() != self.layers {
            return Err(Error::ShapeMismatch(format!(
                "{} invariance columns, log has {}",
                self.layers,
                log.inv_losses.len()
            )));
        }
        let mut row = vec![
            log.epoch.to_string(),
            log.learning_rate.to_string(),
            log.cross_entropy.to_string(),
            log.total_loss.to_string(),
            log.train_accuracy.to_string(),
            log.degenerate_skips.to_string(),
        ];
        row.extend(log.inv_losses.iter().map(|v| opt(*v)));
        self.metrics.write_record(&row)?;
        self.timing.write_record([log.epoch.to_string(), format!("{:.3}", log.seconds)])?;
        self.flush(run_dir)
    }

    fn flush(&mut self, run_dir: &Path) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(run_dir.join(METRICS), e))?;
        self.timing.flush().map_err(|e| Error::io(run_dir.join(TIMING), e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub learning_rate: f64,
    pub cross_entropy: f64,
    pub total_loss: f64,
    pub train_accuracy: f64,
    pub degenerate_skips: usize,
    /// `(layer, value)` for every `inv_conv<l>` column.
    pub inv: Vec<(usize, Option<f64>)>,
}

fn field<T: std::str::FromStr>(path: &Path, row: usize, name: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::MalformedFile(format!("{}: row {row}: bad {name} `{v}`", path.display())))
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(csv::Reader::from_path(path)?)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = open_csv(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < METRICS_FIXED_COLUMNS.len() || header[..METRICS_FIXED_COLUMNS.len()] != METRICS_FIXED_COLUMNS {
        return Err(Error::MalformedFile(format!("{}: unexpected header", path.display())));
    }
    let layers: Vec<usize> = header[METRICS_FIXED_COLUMNS.len()..]
        .iter()
        .map(|h| {
            h.strip_prefix("inv_conv")
                .and_then(|l| l.parse().ok())
                .ok_or_else(|| Error::MalformedFile(format!("{}: unexpected column `{h}`", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::MalformedFile(format!("{}: row {i} has {} fields", path.display(), rec.len())));
        }
        let inv = layers
            .iter()
            .enumerate()
            .map(|(k, &l)| {
                let v = &rec[METRICS_FIXED_COLUMNS.len() + k];
                Ok((l, if v.is_empty() { None } else { Some(field(path, i, "invariance loss", v)?) }))
            })
            .collect::<Result<_>>()?;
        rows.push(MetricsRow {
            epoch: field(path, i, "epoch", &rec[0])?,
            learning_rate: field(path, i, "learning_rate", &rec[1])?,
            cross_entropy: field(path, i, "cross_entropy", &rec[2])?,
            total_loss: field(path, i, "total_loss", &rec[3])?,
            train_accuracy: field(path, i, "train_accuracy", &rec[4])?,
            degenerate_skips: field(path, i, "degenerate_skips", &rec[5])?,
            inv,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaRow {
    pub layer: usize,
    pub image_id: usize,
    pub transform: usize,
    pub sigma: f64,
}

pub fn read_invariance_csv(path: &Path) -> Result<Vec<SigmaRow>> {
    let mut r = open_csv(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != crate::evaluator::INVARIANCE_CSV_HEADER {
        return Err(Error::MalformedFile(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::MalformedFile(format!("{}: row {i} has {} fields", path.display(), rec.len())));
        }
        rows.push(SigmaRow {
            layer: field(path, i, "layer", &rec[0])?,
            image_id: field(path, i, "image_id", &rec[1])?,
            transform: field(path, i, "transform_index", &rec[2])?,
            sigma: field(path, i, "sigma", &rec[3])?,
        });
    }
    Ok(rows)
}

/// Reads `key = value` (or `key=value`) lines of a metadata file.
pub fn read_meta(path: &Path) -> Result<Vec<(String, String)>> {
    if !path.is_file() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::config::parse_key_values(&text))
}
