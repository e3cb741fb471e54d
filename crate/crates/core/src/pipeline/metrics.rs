use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One line of the run log. Column order is the field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub config_hash: String,
    pub seed: u64,
    pub phase: String,
    pub epoch: usize,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub info_nce_benign: Option<f64>,
    pub info_nce_adv: Option<f64>,
    pub disc_loss: Option<f64>,
    pub global_term: Option<f64>,
    pub saturations: u64,
    pub wall_time: f64,
}

impl MetricsRow {
    pub fn new(config_hash: &str, seed: u64, phase: &str, epoch: usize) -> Self {
        MetricsRow {
            config_hash: config_hash.to_string(),
            seed,
            phase: phase.to_string(),
            epoch,
            clean_acc: None,
            robust_acc: None,
            info_nce_benign: None,
            info_nce_adv: None,
            disc_loss: None,
            global_term: None,
            saturations: 0,
            wall_time: 0.0,
        }
    }
}

pub fn write_rows<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Appends rows to a CSV file, writing the header only when the file is
/// new. Each row is flushed as one complete line.
pub struct CsvAppender {
    writer: csv::Writer<std::fs::File>,
}

impl CsvAppender {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path)
            .map(|m| m.len() == 0)
            .unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let writer = csv::WriterBuilder::new()
            .has_headers(fresh)
            .from_writer(file);
        Ok(CsvAppender { writer })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}
