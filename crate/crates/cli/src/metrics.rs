//! The per-update metrics file.

use std::io::{Read, Write};
use std::path::Path;

use metarims::metaloop::UpdateMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const COLUMNS: [&str; 8] = [
    "frames",
    "updates",
    "mean_reward",
    "success_rate",
    "loss_clip",
    "loss_value",
    "entropy",
    "fps",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub frames: u64,
    pub updates: u64,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub loss_clip: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub fps: f64,
}

impl From<&UpdateMetrics> for MetricsRow {
    fn from(m: &UpdateMetrics) -> Self {
        Self {
            frames: m.frames,
            updates: m.updates,
            mean_reward: m.mean_reward,
            success_rate: m.success_rate,
            loss_clip: m.loss_clip,
            loss_value: m.loss_value,
            entropy: m.entropy,
            fps: m.fps,
        }
    }
}

/// Streams rows to a CSV sink; the header is written on creation.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<std::fs::File> {
    pub fn create(path: &Path) -> Result<Self> {
        Self::new(std::fs::File::create(path)?)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(sink: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
        inner.write_record(COLUMNS)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| CliError::Runtime(e.to_string()))
    }
}

pub fn read_metrics<R: Read>(source: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(CliError::Runtime(format!("unexpected metrics header {header:?}")));
    }
    rdr.deserialize().map(|r| Ok(r?)).collect()
}

pub fn read_metrics_file(path: &Path) -> Result<Vec<MetricsRow>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    read_metrics(f)
}
