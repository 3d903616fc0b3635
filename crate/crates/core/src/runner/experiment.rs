//! Sweeps over (strategy, alpha, epochs, seed) and the derived tables.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, HaltingSetting};
use super::federation::{prepare_data, run_prepared, Cell, FederatedData, RunRecord};
use crate::aggregation::StrategyKind;
use crate::analysis::{
    all_pairs, chebyshev, expected_equal_error, pairwise_strategy_diffs, sq_euclid,
    DiffDistribution, StrategyContributions,
};
use crate::contribution::{
    ground_truth, normalize, optimal_halting_round, weighted_cumulative, ContributionVector,
};
use crate::error::{Error, Result};

pub const FLAG_NON_NORMALIZABLE: &str = "non_normalizable";
pub const FLAG_NEGATIVE: &str = "negative_contribution";
pub const FLAG_NO_OPTIMAL_R: &str = "no_optimal_r";

/// Contribution outcome of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub task: String,
    pub alpha: f64,
    pub epochs: usize,
    pub strategy: StrategyKind,
    pub seed: u64,
    pub halting_round: Option<usize>,
    pub ground_truth: Vec<f64>,
    /// `phi_k(R)` before normalisation.
    pub raw: Vec<f64>,
    pub contribution: Option<Vec<f64>>,
    pub raw_shapley_sum: Option<f64>,
    pub sq_euclid: Option<f64>,
    pub chebyshev: Option<f64>,
    pub optimal_r: Option<usize>,
    pub flags: Vec<String>,
}

impl CellResult {
    pub fn num_clients(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn failed(&self) -> bool {
        self.flags.iter().any(|f| f.starts_with("error"))
    }
}

/// Per (task, alpha, epochs, strategy) means across seeds, over cells with a
/// normalizable contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub alpha: f64,
    pub epochs: usize,
    pub strategy: StrategyKind,
    pub num_clients: usize,
    pub cells: usize,
    pub valid_cells: usize,
    pub mean_sq_euclid: Option<f64>,
    pub median_sq_euclid: Option<f64>,
    pub mean_chebyshev: Option<f64>,
    pub mean_optimal_r: Option<f64>,
    pub expected_equal_error: Option<f64>,
}

impl SummaryRow {
    /// True when the mean distance is below the equal-payout baseline.
    pub fn beats_equal(&self) -> Option<bool> {
        Some(self.mean_sq_euclid? < self.expected_equal_error?)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub histograms: BTreeMap<(StrategyKind, StrategyKind), DiffDistribution>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    /// Successful runs, in grid order.
    pub records: Vec<RunRecord>,
    pub failures: Vec<(Cell, String)>,
}

/// Grid order: alpha, epochs, strategy, seed as listed in the config.
pub fn grid(config: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &alpha in &config.alphas {
        for &epochs in &config.epochs_list {
            for &strategy in &config.strategies {
                for &seed in &config.seeds {
                    cells.push(Cell {
                        strategy,
                        alpha,
                        epochs,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn map_maybe_parallel<T, U, F>(items: &[T], parallel: bool, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

type Group = (u64, usize, StrategyKind);

fn group_key(cell: &Cell) -> Group {
    (cell.alpha.to_bits(), cell.epochs, cell.strategy)
}

/// Runs every cell, then derives contributions, distances, optimal halting
/// rounds, summary means and pairwise strategy differences.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let base = config.task.load()?;
    config.check_eval_split(base.len())?;
    let task = config.task.name();

    let mut splits: Vec<(u64, u64)> = Vec::new();
    for &alpha in &config.alphas {
        for &seed in &config.seeds {
            if !splits.contains(&(alpha.to_bits(), seed)) {
                splits.push((alpha.to_bits(), seed));
            }
        }
    }
    let prepared: Vec<Result<FederatedData>> =
        map_maybe_parallel(&splits, config.parallel, |&(a, s)| {
            prepare_data(config, &base, f64::from_bits(a), s)
        });
    let data: HashMap<(u64, u64), &Result<FederatedData>> =
        splits.iter().copied().zip(prepared.iter()).collect();

    let cells = grid(config);
    let runs: Vec<Result<RunRecord>> =
        map_maybe_parallel(&cells, config.parallel, |cell| {
            match data[&(cell.alpha.to_bits(), cell.seed)] {
                Ok(d) => run_prepared(config, d, &base, *cell),
                Err(e) => Err(Error::invalid(e.to_string())),
            }
        });

    // optimal halting rounds and realized ground truth per successful run
    let mut optimal: Vec<Option<usize>> = Vec::with_capacity(runs.len());
    let mut truths = Vec::with_capacity(runs.len());
    for run in &runs {
        match run {
            Ok(rec) => {
                let truth = ground_truth(&rec.client_sizes)?;
                optimal.push(
                    optimal_halting_round(&rec.shapley, &truth)
                        .ok()
                        .map(|c| c.halting_round),
                );
                truths.push(Some(truth));
            }
            Err(_) => {
                optimal.push(None);
                truths.push(None);
            }
        }
    }

    let mut auto_rounds: HashMap<Group, usize> = HashMap::new();
    if config.halting() == HaltingSetting::Auto {
        let mut acc: HashMap<Group, (usize, usize)> = HashMap::new();
        for (cell, r) in cells.iter().zip(&optimal) {
            if let Some(r) = r {
                let e = acc.entry(group_key(cell)).or_default();
                e.0 += r;
                e.1 += 1;
            }
        }
        for (k, (sum, n)) in acc {
            let mean = sum as f64 / n as f64;
            auto_rounds.insert(k, (mean.round() as usize).clamp(1, config.rounds));
        }
    }

    let mut results = Vec::with_capacity(cells.len());
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (((cell, run), truth), opt) in cells.iter().zip(runs).zip(truths).zip(optimal) {
        let mut result = CellResult {
            task: task.clone(),
            alpha: cell.alpha,
            epochs: cell.epochs,
            strategy: cell.strategy,
            seed: cell.seed,
            halting_round: None,
            ground_truth: vec![],
            raw: vec![],
            contribution: None,
            raw_shapley_sum: None,
            sq_euclid: None,
            chebyshev: None,
            optimal_r: opt,
            flags: vec![],
        };
        match run {
            Err(e) => {
                result.flags.push(format!("error: {e}"));
                failures.push((*cell, e.to_string()));
            }
            Ok(mut rec) => {
                let truth = truth.expect("truth exists for successful runs");
                let r = match config.halting() {
                    HaltingSetting::Round(r) => r,
                    HaltingSetting::Auto => auto_rounds
                        .get(&group_key(cell))
                        .copied()
                        .unwrap_or(config.rounds),
                };
                let raw = weighted_cumulative(&rec.shapley, r)?;
                result.halting_round = Some(r);
                result.raw_shapley_sum = Some(raw.iter().sum());
                match normalize(&raw) {
                    Ok(c) => {
                        if c.has_negative() {
                            result.flags.push(FLAG_NEGATIVE.into());
                        }
                        result.sq_euclid = Some(sq_euclid(&c.percentages, &truth.percentages)?);
                        result.chebyshev = Some(chebyshev(&c.percentages, &truth.percentages)?);
                        result.contribution = Some(c.percentages);
                    }
                    Err(_) => result.flags.push(FLAG_NON_NORMALIZABLE.into()),
                }
                if opt.is_none() {
                    result.flags.push(FLAG_NO_OPTIMAL_R.into());
                }
                result.raw = raw;
                result.ground_truth = truth.percentages;
                rec.flags = result.flags.clone();
                records.push(rec);
            }
        }
        results.push(result);
    }

    let summary = summarize(&results);
    let histograms = strategy_diffs(&results)?;
    Ok(ExperimentOutput {
        table: ResultTable {
            cells: results,
            summary,
            histograms,
        },
        records,
        failures,
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Groups cells by (task, alpha, epochs, strategy) in first-seen order and
/// averages over seeds.
pub fn summarize(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, u64, usize, StrategyKind)> = Vec::new();
    let mut groups: HashMap<(String, u64, usize, StrategyKind), Vec<&CellResult>> = HashMap::new();
    for c in cells {
        let key = (c.task.clone(), c.alpha.to_bits(), c.epochs, c.strategy);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(c);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let valid: Vec<&&CellResult> =
                members.iter().filter(|c| c.sq_euclid.is_some()).collect();
            let sq: Vec<f64> = valid.iter().filter_map(|c| c.sq_euclid).collect();
            let cheb: Vec<f64> = valid.iter().filter_map(|c| c.chebyshev).collect();
            let opt: Vec<f64> = members
                .iter()
                .filter_map(|c| c.optimal_r.map(|r| r as f64))
                .collect();
            let num_clients = members.iter().map(|c| c.num_clients()).max().unwrap_or(0);
            let alpha = f64::from_bits(key.1);
            SummaryRow {
                task: key.0.clone(),
                alpha,
                epochs: key.2,
                strategy: key.3,
                num_clients,
                cells: members.len(),
                valid_cells: valid.len(),
                mean_sq_euclid: mean(&sq),
                median_sq_euclid: median(&sq),
                mean_chebyshev: mean(&cheb),
                mean_optimal_r: mean(&opt),
                expected_equal_error: expected_equal_error(num_clients, alpha).ok(),
            }
        })
        .collect()
}

/// Pairwise client-wise differences between strategies, pooled over every
/// (task, alpha, epochs, seed) cell in which both strategies produced a
/// normalizable contribution.
pub fn strategy_diffs(
    cells: &[CellResult],
) -> Result<BTreeMap<(StrategyKind, StrategyKind), DiffDistribution>> {
    let mut order: Vec<(String, u64, usize, u64)> = Vec::new();
    let mut groups: HashMap<(String, u64, usize, u64), StrategyContributions> = HashMap::new();
    for c in cells {
        let Some(p) = &c.contribution else { continue };
        let key = (c.task.clone(), c.alpha.to_bits(), c.epochs, c.seed);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().insert(
            c.strategy,
            ContributionVector {
                percentages: p.clone(),
                raw: c.raw.clone(),
            },
        );
    }
    let grouped: Vec<StrategyContributions> = order
        .into_iter()
        .map(|k| groups.remove(&k).unwrap())
        .collect();
    let mut kinds: Vec<StrategyKind> = grouped.iter().flat_map(|g| g.keys().copied()).collect();
    kinds.sort();
    kinds.dedup();
    let mut out = BTreeMap::new();
    for (i, &a) in kinds.iter().enumerate() {
        for &b in &kinds[i + 1..] {
            let both: Vec<StrategyContributions> = grouped
                .iter()
                .filter(|g| g.contains_key(&a) && g.contains_key(&b))
                .cloned()
                .collect();
            if both.is_empty() {
                continue;
            }
            debug_assert!(all_pairs(&both).contains(&(a, b)));
            out.extend(pairwise_strategy_diffs(&both, &[(a, b)])?);
        }
    }
    Ok(out)
}
