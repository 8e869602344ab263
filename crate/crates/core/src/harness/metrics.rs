//! Per-round metrics, their CSV/JSON forms, and the convergence-epoch rule.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the metrics CSV.
pub const METRICS_CSV_HEADER: &str = "round,epoch,uplink_bytes,downlink_bytes,train_loss,val_accuracy,\
mean_divergence,max_divergence,sync_interval,mean_compression_c,sim_time_s,mean_sync_delay_s,max_sync_delay_s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub epoch: u32,
    /// Bytes sent device-to-cloud during this round.
    pub uplink_bytes: u64,
    /// Bytes sent cloud-to-device during this round.
    pub downlink_bytes: u64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub mean_divergence: f64,
    pub max_divergence: f64,
    pub sync_interval: u32,
    /// Zero for methods without a compression schedule.
    pub mean_compression_c: f64,
    /// Simulated time at the end of the round.
    pub sim_time_s: f64,
    /// Mean and max uplink transfer time of the round; zero without uploads.
    pub mean_sync_delay_s: f64,
    pub max_sync_delay_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// Picks the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

impl MetricsLog {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn total_uplink_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.uplink_bytes).sum()
    }

    pub fn total_downlink_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.downlink_bytes).sum()
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// `(epoch, accuracy at the epoch's last round)` in epoch order.
    pub fn epoch_accuracies(&self) -> Vec<(u32, f64)> {
        let mut out: Vec<(u32, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.epoch => last.1 = r.val_accuracy,
                _ => out.push((r.epoch, r.val_accuracy)),
            }
        }
        out
    }

    /// Checks the row invariants every emitted log must satisfy.
    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if w[1].round <= w[0].round {
                return Err(Error::Invariant(format!(
                    "rounds not strictly increasing: {} then {}",
                    w[0].round, w[1].round
                )));
            }
        }
        if let Some(r) = self.rows.iter().find(|r| !r.train_loss.is_finite()) {
            return Err(Error::Invariant(format!("non-finite loss at round {}", r.round)));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(METRICS_CSV_HEADER.split(','))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(input);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        if header.join(",") != METRICS_CSV_HEADER {
            return Err(Error::Parse {
                line: 1,
                msg: format!("unexpected metrics header `{}`", header.join(",")),
            });
        }
        let rows = rd.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
        Ok(MetricsLog { rows })
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.rows)?;
        Ok(())
    }

    pub fn read_json<R: Read>(input: R) -> Result<Self> {
        let rows: Vec<MetricsRow> = serde_json::from_reader(input)?;
        Ok(MetricsLog { rows })
    }

    pub fn emit(&self, format: Format, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        match format {
            Format::Csv => self.write_csv(&mut out)?,
            Format::Json => self.write_json(&mut out)?,
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let input = BufReader::new(File::open(path)?);
        match Format::from_path(path) {
            Format::Csv => Self::read_csv(input),
            Format::Json => Self::read_json(input),
        }
    }
}

/// Accuracy of the last epoch in the log.
pub fn final_accuracy(log: &MetricsLog) -> Result<f64> {
    log.epoch_accuracies()
        .last()
        .map(|(_, a)| *a)
        .ok_or_else(|| Error::Invariant("empty metrics log has no final accuracy".into()))
}

/// First epoch whose accuracy is at least `0.99 * final_acc`.
pub fn convergence_epoch(log: &MetricsLog, final_acc: f64) -> Result<u32> {
    let epochs = log.epoch_accuracies();
    if epochs.is_empty() {
        return Err(Error::Invariant("empty metrics log has no convergence epoch".into()));
    }
    epochs
        .iter()
        .find(|(_, a)| *a >= 0.99 * final_acc)
        .map(|(e, _)| *e)
        .ok_or_else(|| Error::Invariant(format!("no epoch reaches 99% of {final_acc}")))
}
