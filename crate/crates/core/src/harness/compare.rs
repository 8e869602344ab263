//! Multi-method, multi-seed comparison in the shape of a results table.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::metrics::{convergence_epoch, final_accuracy, Format, MetricsLog};
use super::run::run_experiment;
use crate::error::{Error, Result};

pub const COMPARISON_CSV_HEADER: &str =
    "method,runs,final_accuracy,uplink_gb,downlink_gb,convergence_epoch,final_loss";

/// Means over seeds for one method. Communication is in units of 1e9 bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub runs: usize,
    pub final_accuracy: f64,
    pub uplink_gb: f64,
    pub downlink_gb: f64,
    pub convergence_epoch: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub method: Method,
    /// Position of the originating config in the input list.
    pub config_index: usize,
    pub seed: u64,
    pub log: MetricsLog,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub cells: Vec<CellResult>,
}

fn same_workload(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.arch == b.arch
        && a.data == b.data
        && a.devices == b.devices
        && a.rounds == b.rounds
        && a.batch_size == b.batch_size
        && a.local_batches_per_round == b.local_batches_per_round
}

fn summarize(cells: &[&CellResult]) -> Result<ComparisonRow> {
    let n = cells.len() as f64;
    let mut row = ComparisonRow {
        method: cells[0].method.name().to_string(),
        runs: cells.len(),
        final_accuracy: 0.0,
        uplink_gb: 0.0,
        downlink_gb: 0.0,
        convergence_epoch: 0.0,
        final_loss: 0.0,
    };
    for c in cells {
        let last = c
            .log
            .last()
            .ok_or_else(|| Error::Config("comparison needs at least one round".into()))?;
        let acc = final_accuracy(&c.log)?;
        row.final_accuracy += acc / n;
        row.uplink_gb += c.log.total_uplink_bytes() as f64 / 1e9 / n;
        row.downlink_gb += c.log.total_downlink_bytes() as f64 / 1e9 / n;
        row.convergence_epoch += convergence_epoch(&c.log, acc)? as f64 / n;
        row.final_loss += last.train_loss / n;
    }
    Ok(row)
}

/// Runs every config over every seed. Cells run in parallel; the report is
/// assembled in (config, seed) order so it does not depend on scheduling.
pub fn compare(configs: &[ExperimentConfig], seeds: &[u64]) -> Result<ComparisonReport> {
    if configs.len() < 2 {
        return Err(Error::Config("comparison needs at least two configs".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one seed".into()));
    }
    if configs.iter().any(|c| !same_workload(c, &configs[0])) {
        return Err(Error::Config(
            "compared configs must share arch, data, devices, rounds and batching".into(),
        ));
    }
    for c in configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let cfg = ExperimentConfig {
                seed,
                ..configs[i].clone()
            };
            Ok(CellResult {
                method: cfg.method,
                config_index: i,
                seed,
                log: run_experiment(&cfg)?,
            })
        })
        .collect::<Result<_>>()?;
    let rows = (0..configs.len())
        .map(|i| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.config_index == i).collect();
            summarize(&mine)
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonReport { rows, cells })
}

impl ComparisonReport {
    pub fn row(&self, method: Method) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method.name())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(COMPARISON_CSV_HEADER.split(','))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<ComparisonRow>> {
        let mut rd = csv::Reader::from_reader(input);
        Ok(rd.deserialize().collect::<std::result::Result<_, _>>()?)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.rows)?;
        Ok(())
    }

    /// File name of one cell's metrics; configs sharing a method get their
    /// position appended so names stay unique.
    pub fn cell_file_name(&self, cell: &CellResult) -> String {
        let shared = self
            .cells
            .iter()
            .any(|c| c.method == cell.method && c.config_index != cell.config_index);
        if shared {
            format!("metrics_{}-{}_{}.csv", cell.method, cell.config_index, cell.seed)
        } else {
            format!("metrics_{}_{}.csv", cell.method, cell.seed)
        }
    }

    /// Writes every cell's metrics plus `comparison.csv` and `comparison.json`.
    pub fn emit(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for cell in &self.cells {
            let path = dir.join(self.cell_file_name(cell));
            cell.log.emit(Format::Csv, &path)?;
            written.push(path);
        }
        let csv_path = dir.join("comparison.csv");
        let mut out = BufWriter::new(File::create(&csv_path)?);
        self.write_csv(&mut out)?;
        out.flush()?;
        written.push(csv_path);
        let json_path = dir.join("comparison.json");
        let mut out = BufWriter::new(File::create(&json_path)?);
        self.write_json(&mut out)?;
        out.flush()?;
        written.push(json_path);
        Ok(written)
    }
}
