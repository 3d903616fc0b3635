//! CSV and JSON result files.
//!
//! Four tables are written to the output directory, each as
//! `<name>.csv` or `<name>.json`:
//!
//! * `cells`: one row per (cell, client) with columns `task, alpha, epochs,
//!   strategy, seed, client_id, contribution, ground_truth, raw_shapley_sum,
//!   sq_euclid, chebyshev, optimal_R, flags`.
//! * `summary`: per (task, alpha, epochs, strategy) means, distances x100.
//! * `histograms`: `pair, bin_lower, bin_upper, count`.
//! * `pair_stats`: per strategy pair sample count, mean, std and max |diff|.
//!
//! Rows are sorted on their key columns so output is independent of
//! execution order. Missing values are empty in CSV and `null` in JSON.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::experiment::{summarize, CellResult, ResultTable, SummaryRow};
use crate::aggregation::StrategyKind;
use crate::analysis::DiffDistribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::invalid(format!("unknown format {other:?}"))),
        }
    }
}

pub const CELL_COLUMNS: [&str; 13] = [
    "task",
    "alpha",
    "epochs",
    "strategy",
    "seed",
    "client_id",
    "contribution",
    "ground_truth",
    "raw_shapley_sum",
    "sq_euclid",
    "chebyshev",
    "optimal_R",
    "flags",
];

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "task",
    "alpha",
    "epochs",
    "strategy",
    "num_clients",
    "cells",
    "valid_cells",
    "sq_euclid_x100",
    "median_sq_euclid_x100",
    "chebyshev_x100",
    "optimal_R_mean",
    "expected_equal_error_x100",
    "beats_equal",
];

pub const HISTOGRAM_COLUMNS: [&str; 4] = ["pair", "bin_lower", "bin_upper", "count"];

pub const PAIR_STATS_COLUMNS: [&str; 5] = ["pair", "samples", "mean", "std", "max_abs"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub task: String,
    pub alpha: f64,
    pub epochs: usize,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub client_id: Option<usize>,
    pub contribution: Option<f64>,
    pub ground_truth: Option<f64>,
    pub raw_shapley_sum: Option<f64>,
    pub sq_euclid: Option<f64>,
    pub chebyshev: Option<f64>,
    #[serde(rename = "optimal_R")]
    pub optimal_r: Option<usize>,
    /// `;`-separated.
    pub flags: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFileRow {
    pub task: String,
    pub alpha: f64,
    pub epochs: usize,
    pub strategy: StrategyKind,
    pub num_clients: usize,
    pub cells: usize,
    pub valid_cells: usize,
    pub sq_euclid_x100: Option<f64>,
    pub median_sq_euclid_x100: Option<f64>,
    pub chebyshev_x100: Option<f64>,
    #[serde(rename = "optimal_R_mean")]
    pub optimal_r_mean: Option<f64>,
    pub expected_equal_error_x100: Option<f64>,
    pub beats_equal: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub pair: String,
    pub bin_lower: f64,
    pub bin_upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStatsRow {
    pub pair: String,
    pub samples: usize,
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
}

pub fn pair_name(pair: &(StrategyKind, StrategyKind)) -> String {
    format!("{}-{}", pair.0, pair.1)
}

fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.total_cmp(&b)
}

pub fn cell_rows(cells: &[CellResult]) -> Vec<CellRow> {
    let mut rows = Vec::new();
    for c in cells {
        let flags = c.flags.join(";");
        let clients = c.ground_truth.len();
        let base = CellRow {
            task: c.task.clone(),
            alpha: c.alpha,
            epochs: c.epochs,
            strategy: c.strategy,
            seed: c.seed,
            client_id: None,
            contribution: None,
            ground_truth: None,
            raw_shapley_sum: c.raw_shapley_sum,
            sq_euclid: c.sq_euclid,
            chebyshev: c.chebyshev,
            optimal_r: c.optimal_r,
            flags,
        };
        if clients == 0 {
            rows.push(base);
            continue;
        }
        for k in 0..clients {
            rows.push(CellRow {
                client_id: Some(k),
                contribution: c.contribution.as_ref().map(|p| p[k]),
                ground_truth: Some(c.ground_truth[k]),
                ..base.clone()
            });
        }
    }
    rows.sort_by(|a, b| {
        a.task
            .cmp(&b.task)
            .then(cmp_f64(a.alpha, b.alpha))
            .then(a.epochs.cmp(&b.epochs))
            .then(a.strategy.name().cmp(b.strategy.name()))
            .then(a.seed.cmp(&b.seed))
            .then(a.client_id.cmp(&b.client_id))
    });
    rows
}

pub fn summary_rows(summary: &[SummaryRow]) -> Vec<SummaryFileRow> {
    let x100 = |v: Option<f64>| v.map(|x| x * 100.0);
    let mut rows: Vec<SummaryFileRow> = summary
        .iter()
        .map(|s| SummaryFileRow {
            task: s.task.clone(),
            alpha: s.alpha,
            epochs: s.epochs,
            strategy: s.strategy,
            num_clients: s.num_clients,
            cells: s.cells,
            valid_cells: s.valid_cells,
            sq_euclid_x100: x100(s.mean_sq_euclid),
            median_sq_euclid_x100: x100(s.median_sq_euclid),
            chebyshev_x100: x100(s.mean_chebyshev),
            optimal_r_mean: s.mean_optimal_r,
            expected_equal_error_x100: x100(s.expected_equal_error),
            beats_equal: s.beats_equal(),
        })
        .collect();
    rows.sort_by(|a, b| {
        a.task
            .cmp(&b.task)
            .then(cmp_f64(a.alpha, b.alpha))
            .then(a.epochs.cmp(&b.epochs))
            .then(a.strategy.name().cmp(b.strategy.name()))
    });
    rows
}

pub fn histogram_rows(
    histograms: &BTreeMap<(StrategyKind, StrategyKind), DiffDistribution>,
) -> Vec<HistogramRow> {
    let mut rows: Vec<HistogramRow> = histograms
        .iter()
        .flat_map(|(pair, d)| {
            let name = pair_name(pair);
            d.counts
                .iter()
                .enumerate()
                .map(move |(i, &count)| HistogramRow {
                    pair: name.clone(),
                    bin_lower: d.bin_edges[i],
                    bin_upper: d.bin_edges[i + 1],
                    count,
                })
        })
        .collect();
    rows.sort_by(|a, b| a.pair.cmp(&b.pair).then(cmp_f64(a.bin_lower, b.bin_lower)));
    rows
}

pub fn pair_stats_rows(
    histograms: &BTreeMap<(StrategyKind, StrategyKind), DiffDistribution>,
) -> Vec<PairStatsRow> {
    let mut rows: Vec<PairStatsRow> = histograms
        .iter()
        .map(|(pair, d)| PairStatsRow {
            pair: pair_name(pair),
            samples: d.samples.len(),
            mean: d.mean(),
            std: d.std_dev(),
            max_abs: d.max_abs(),
        })
        .collect();
    rows.sort_by(|a, b| a.pair.cmp(&b.pair));
    rows
}

fn write_table<T: Serialize>(
    dir: &Path,
    name: &str,
    columns: &[&str],
    rows: &[T],
    format: Format,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.{}", format.extension()));
    let bytes = match format {
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(Vec::new());
            w.write_record(columns)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.into_inner()
                .map_err(|e| Error::io(&path, e.into_error()))?
        }
        Format::Json => {
            let mut s = serde_json::to_vec_pretty(rows)?;
            s.push(b'\n');
            s
        }
    };
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes the cells, summary, histogram and pair statistics tables.
pub fn emit_results(table: &ResultTable, format: Format, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(vec![
        write_table(
            dir,
            "cells",
            &CELL_COLUMNS,
            &cell_rows(&table.cells),
            format,
        )?,
        write_table(
            dir,
            "summary",
            &SUMMARY_COLUMNS,
            &summary_rows(&table.summary),
            format,
        )?,
        write_table(
            dir,
            "histograms",
            &HISTOGRAM_COLUMNS,
            &histogram_rows(&table.histograms),
            format,
        )?,
        write_table(
            dir,
            "pair_stats",
            &PAIR_STATS_COLUMNS,
            &pair_stats_rows(&table.histograms),
            format,
        )?,
    ])
}

/// Writes only the histogram and pair statistics tables.
pub fn emit_diffs(
    histograms: &BTreeMap<(StrategyKind, StrategyKind), DiffDistribution>,
    format: Format,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    Ok(vec![
        write_table(
            dir,
            "histograms",
            &HISTOGRAM_COLUMNS,
            &histogram_rows(histograms),
            format,
        )?,
        write_table(
            dir,
            "pair_stats",
            &PAIR_STATS_COLUMNS,
            &pair_stats_rows(histograms),
            format,
        )?,
    ])
}

pub fn emit_summary(summary: &[SummaryRow], format: Format, dir: &Path) -> Result<PathBuf> {
    write_table(
        dir,
        "summary",
        &SUMMARY_COLUMNS,
        &summary_rows(summary),
        format,
    )
}

fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_slice(&bytes)?);
    }
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn read_cell_rows(path: &Path) -> Result<Vec<CellRow>> {
    read_table(path)
}

pub fn read_summary_rows(path: &Path) -> Result<Vec<SummaryFileRow>> {
    read_table(path)
}

pub fn read_histogram_rows(path: &Path) -> Result<Vec<HistogramRow>> {
    read_table(path)
}

/// Finds `cells.csv` or `cells.json` in a results directory.
pub fn find_cells_file(dir: &Path) -> Result<PathBuf> {
    for ext in ["csv", "json"] {
        let p = dir.join(format!("cells.{ext}"));
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::invalid(format!(
        "no cells.csv or cells.json in {}",
        dir.display()
    )))
}

/// Rebuilds per-cell results from emitted rows.
pub fn cells_from_rows(rows: &[CellRow]) -> Vec<CellResult> {
    let mut out: Vec<CellResult> = Vec::new();
    for row in rows {
        let same = out.last().is_some_and(|c: &CellResult| {
            c.task == row.task
                && c.alpha.to_bits() == row.alpha.to_bits()
                && c.epochs == row.epochs
                && c.strategy == row.strategy
                && c.seed == row.seed
        });
        if !same {
            out.push(CellResult {
                task: row.task.clone(),
                alpha: row.alpha,
                epochs: row.epochs,
                strategy: row.strategy,
                seed: row.seed,
                halting_round: None,
                ground_truth: vec![],
                raw: vec![],
                contribution: row.contribution.map(|_| vec![]),
                raw_shapley_sum: row.raw_shapley_sum,
                sq_euclid: row.sq_euclid,
                chebyshev: row.chebyshev,
                optimal_r: row.optimal_r,
                flags: row
                    .flags
                    .split(';')
                    .filter(|f| !f.is_empty())
                    .map(str::to_string)
                    .collect(),
            });
        }
        let cell = out.last_mut().expect("just pushed");
        if let Some(g) = row.ground_truth {
            cell.ground_truth.push(g);
        }
        if let (Some(p), Some(c)) = (row.contribution, cell.contribution.as_mut()) {
            c.push(p);
        }
    }
    out
}

/// Summary recomputed from emitted cell rows.
pub fn summary_from_rows(rows: &[CellRow]) -> Vec<SummaryRow> {
    summarize(&cells_from_rows(rows))
}
