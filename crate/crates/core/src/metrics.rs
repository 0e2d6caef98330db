//! Run records and their CSV form.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Prune,
    Retrain,
}

/// One CSV row: an evaluation point seen from one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub layer_id: usize,
    pub pruned_fraction: f64,
    pub mean_p: f64,
}

pub const METRICS_HEADER: [&str; 7] = [
    "iteration",
    "phase",
    "loss",
    "val_acc",
    "layer_id",
    "pruned_fraction",
    "mean_p",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    /// Final recovery ratio per pruned conv layer, as `(layer_id, ratio)`.
    pub recovery: Vec<(usize, f64)>,
}

impl RunMetrics {
    /// Appends one row per layer for an evaluation point.
    pub fn push_point(
        &mut self,
        iteration: usize,
        phase: Phase,
        loss: Option<f64>,
        val_acc: Option<f64>,
        pruned_fraction: &[f64],
        mean_p: &[f64],
    ) {
        for (layer_id, (&pf, &mp)) in pruned_fraction.iter().zip(mean_p).enumerate() {
            self.records.push(MetricRecord {
                iteration,
                phase,
                loss,
                val_acc,
                layer_id,
                pruned_fraction: pf,
                mean_p: mp,
            });
        }
    }

    pub fn extend(&mut self, other: RunMetrics) {
        self.records.extend(other.records);
        self.recovery.extend(other.recovery);
    }
}

pub(crate) fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

/// Writes records as CSV with a fixed header row, UTF-8 with LF line endings.
pub fn write_metrics<W: Write>(records: &[MetricRecord], w: W) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in records {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn emit_metrics(metrics: &RunMetrics, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(&metrics.records, file)
}

pub fn parse_metrics<R: std::io::Read>(r: R) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    parse_metrics(File::open(path).map_err(|e| Error::io(path, e))?)
}
