//! Distances to the ground truth, the equal-payout baseline and
//! cross-strategy contribution differences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::StrategyKind;
use crate::contribution::ContributionVector;
use crate::data::dirichlet_draw;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_HISTOGRAM_BINS: usize = 60;
pub const DEFAULT_HISTOGRAM_RANGE: (f64, f64) = (-0.6, 0.6);

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

pub fn sq_euclid(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// L-infinity distance.
pub fn chebyshev(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max))
}

/// Mean squared Euclidean gap between an equal payout and a size-based
/// payout when sizes follow a symmetric Dirichlet(alpha) over `n` clients:
/// `(n - 1) / (n^2 alpha + n)`.
pub fn expected_equal_error(n: usize, alpha: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("need at least two clients"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let n = n as f64;
    Ok((n - 1.0) / (n * n * alpha + n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaCheck {
    pub n: usize,
    pub alpha: f64,
    pub draws: usize,
    pub analytic: f64,
    pub empirical: f64,
    pub relative_error: f64,
}

/// Compares [`expected_equal_error`] with the empirical mean of
/// `sq_euclid(draw, uniform)` over `draws` Dirichlet draws.
pub fn lemma_check(n: usize, alpha: f64, draws: usize, seed: u64) -> Result<LemmaCheck> {
    let analytic = expected_equal_error(n, alpha)?;
    if draws == 0 {
        return Err(Error::invalid("draws must be positive"));
    }
    let mut rng = rng::substream(seed, "lemma-check", &[n as u64, alpha.to_bits()]);
    let uniform = vec![1.0 / n as f64; n];
    let mut total = 0.0;
    for _ in 0..draws {
        let x = dirichlet_draw(&mut rng, alpha, n)?;
        total += sq_euclid(&x, &uniform)?;
    }
    let empirical = total / draws as f64;
    Ok(LemmaCheck {
        n,
        alpha,
        draws,
        analytic,
        empirical,
        relative_error: (empirical - analytic).abs() / analytic,
    })
}

/// Contributions of every strategy for one (seed, alpha, epochs, task) cell.
pub type StrategyContributions = BTreeMap<StrategyKind, ContributionVector>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffDistribution {
    pub samples: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl DiffDistribution {
    pub fn mean(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Sample standard deviation (n - 1 denominator).
    pub fn std_dev(&self) -> f64 {
        let n = self.samples.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.mean();
        let ss: f64 = self.samples.iter().map(|x| (x - mean) * (x - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Uniform histogram over `range`; out-of-range samples land in the edge bins.
pub fn histogram(samples: &[f64], num_bins: usize, range: (f64, f64)) -> Result<DiffDistribution> {
    let (lo, hi) = range;
    if num_bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid(format!(
            "invalid histogram range ({lo}, {hi})"
        )));
    }
    let width = (hi - lo) / num_bins as f64;
    let bin_edges = (0..=num_bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; num_bins];
    for &x in samples {
        let pos = ((x - lo) / width).floor();
        let bin = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(num_bins - 1)
        };
        counts[bin] += 1;
    }
    Ok(DiffDistribution {
        samples: samples.to_vec(),
        bin_edges,
        counts,
    })
}

/// Every unordered pair of strategies present in all cells, first < second.
pub fn all_pairs(cells: &[StrategyContributions]) -> Vec<(StrategyKind, StrategyKind)> {
    let Some(first) = cells.first() else {
        return Vec::new();
    };
    let kinds: Vec<StrategyKind> = first
        .keys()
        .copied()
        .filter(|k| cells.iter().all(|c| c.contains_key(k)))
        .collect();
    let mut pairs = Vec::new();
    for (i, a) in kinds.iter().enumerate() {
        for b in &kinds[i + 1..] {
            pairs.push((*a, *b));
        }
    }
    pairs
}

/// Per-client differences `s1[k] - s2[k]` for each requested pair across all
/// cells, binned with the default histogram.
pub fn pairwise_strategy_diffs(
    cells: &[StrategyContributions],
    pairs: &[(StrategyKind, StrategyKind)],
) -> Result<BTreeMap<(StrategyKind, StrategyKind), DiffDistribution>> {
    let mut out = BTreeMap::new();
    for &(s1, s2) in pairs {
        let mut samples = Vec::new();
        for cell in cells {
            let (Some(a), Some(b)) = (cell.get(&s1), cell.get(&s2)) else {
                let missing = if cell.contains_key(&s1) { s2 } else { s1 };
                return Err(Error::invalid(format!("cell lacks strategy {missing}")));
            };
            check_lengths(&a.percentages, &b.percentages)?;
            samples.extend(a.percentages.iter().zip(&b.percentages).map(|(x, y)| x - y));
        }
        out.insert(
            (s1, s2),
            histogram(&samples, DEFAULT_HISTOGRAM_BINS, DEFAULT_HISTOGRAM_RANGE)?,
        );
    }
    Ok(out)
}
