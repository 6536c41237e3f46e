//! Append-only CSV log of `(iteration, split, metric, value, seed)` rows.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};

pub const HEADER: [&str; 5] = ["iteration", "split", "metric", "value", "seed"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

impl MetricRow {
    pub fn new(iteration: u64, split: &str, metric: &str, value: f64, seed: u64) -> Self {
        Self {
            iteration,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
            seed,
        }
    }
}

pub struct MetricsLog {
    path: PathBuf,
    writer: csv::Writer<File>,
    last_iteration: Option<u64>,
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Metrics(format!("{}: {e}", path.display()))
}

impl MetricsLog {
    /// Starts a fresh log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).at(path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer.write_record(HEADER).map_err(|e| csv_err(path, e))?;
        writer.flush().at(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer,
            last_iteration: None,
        })
    }

    /// Reopens a log, keeping only rows logged before `iteration`, so that a
    /// resumed run rewrites exactly what an uninterrupted one would have.
    pub fn resume(path: &Path, iteration: u64) -> Result<Self> {
        let kept: Vec<MetricRow> = if path.exists() {
            Self::read(path)?.into_iter().filter(|r| r.iteration < iteration).collect()
        } else {
            Vec::new()
        };
        let mut log = Self::create(path)?;
        for row in &kept {
            log.append(row)?;
        }
        Ok(log)
    }

    /// Appends to an existing log, creating it when missing.
    pub fn open_append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let last = Self::read(path)?.last().map(|r| r.iteration);
        let file = OpenOptions::new().append(true).open(path).at(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            writer: csv::WriterBuilder::new().has_headers(false).from_writer(file),
            last_iteration: last,
        })
    }

    pub fn append(&mut self, row: &MetricRow) -> Result<()> {
        if self.last_iteration.is_some_and(|last| row.iteration < last) {
            return Err(HarnessError::Metrics(format!(
                "iteration {} logged after {}",
                row.iteration,
                self.last_iteration.unwrap_or_default()
            )));
        }
        self.writer.serialize(row).map_err(|e| csv_err(&self.path, e))?;
        self.last_iteration = Some(row.iteration);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().at(&self.path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn read(path: &Path) -> Result<Vec<MetricRow>> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = reader.headers().map_err(|e| csv_err(path, e))?;
        if header.iter().ne(HEADER) {
            return Err(HarnessError::Metrics(format!("{}: unexpected header {header:?}", path.display())));
        }
        reader
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| csv_err(path, e))
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.writer.flush();
    }
}
