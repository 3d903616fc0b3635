//! Server-side aggregation strategies.
//!
//! Every strategy is driven through [`ServerState::combine`], which advances
//! the server state, and [`ServerState::subset_combine`], which evaluates the
//! same rule on a coalition of updates against the frozen round-start state.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub num_examples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    FedAvg,
    FedAvgM,
    FedAdagrad,
    FedAdam,
    FedYogi,
    FedMedian,
    FedTrimAvg,
    Krum,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 8] = [
        StrategyKind::FedAvg,
        StrategyKind::FedAvgM,
        StrategyKind::FedAdagrad,
        StrategyKind::FedAdam,
        StrategyKind::FedYogi,
        StrategyKind::FedMedian,
        StrategyKind::FedTrimAvg,
        StrategyKind::Krum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedAvgM => "fedavgm",
            StrategyKind::FedAdagrad => "fedadagrad",
            StrategyKind::FedAdam => "fedadam",
            StrategyKind::FedYogi => "fedyogi",
            StrategyKind::FedMedian => "fedmedian",
            StrategyKind::FedTrimAvg => "fedtrimavg",
            StrategyKind::Krum => "krum",
        }
    }

    pub fn has_momentum(self) -> bool {
        matches!(
            self,
            StrategyKind::FedAvgM | StrategyKind::FedAdam | StrategyKind::FedYogi
        )
    }

    pub fn has_second_moment(self) -> bool {
        matches!(
            self,
            StrategyKind::FedAdagrad | StrategyKind::FedAdam | StrategyKind::FedYogi
        )
    }

    pub fn is_stateful(self) -> bool {
        self.has_momentum() || self.has_second_moment()
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {s:?}")))
    }
}

/// Server hyperparameters. Defaults are the out-of-the-box values used for
/// every strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Server learning rate of the adaptive strategies.
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adaptivity floor added to `sqrt(v)`.
    pub tau: f64,
    /// FedAvgM server momentum.
    pub server_momentum: f64,
    pub trim_fraction: f64,
    /// Number of tolerated byzantine clients for Krum.
    pub byzantine: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            eta: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-9,
            server_momentum: 0.9,
            trim_fraction: 0.2,
            byzantine: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be positive"));
        }
        if !unit(self.beta1) || !unit(self.beta2) || !unit(self.server_momentum) {
            return Err(Error::invalid("momentum coefficients must lie in [0, 1]"));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau must be non-negative"));
        }
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return Err(Error::invalid("trim_fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub kind: StrategyKind,
    pub round: u64,
    pub global_params: ParamVector,
    pub momentum: Option<ParamVector>,
    pub second_moment: Option<ParamVector>,
    pub hyper: Hyper,
}

struct Step {
    params: Vec<f64>,
    momentum: Option<Vec<f64>>,
    second_moment: Option<Vec<f64>>,
}

impl ServerState {
    /// Fresh state at round 0 with zeroed optimizer buffers.
    pub fn new(kind: StrategyKind, global_params: ParamVector, hyper: Hyper) -> Self {
        let n = global_params.len();
        ServerState {
            kind,
            round: 0,
            momentum: kind.has_momentum().then(|| ParamVector::zeros(n)),
            second_moment: kind.has_second_moment().then(|| ParamVector::zeros(n)),
            global_params,
            hyper,
        }
    }

    /// Aggregates a full round of updates and returns the new global model
    /// together with the advanced state.
    pub fn combine(&self, updates: &[ClientUpdate]) -> Result<(ParamVector, ServerState)> {
        if updates.is_empty() {
            return Err(Error::EmptyUpdates);
        }
        let step = self.step(updates, false)?;
        let params = ParamVector::new(step.params)?;
        let next = ServerState {
            kind: self.kind,
            round: self.round + 1,
            global_params: params.clone(),
            momentum: step.momentum.map(ParamVector::new).transpose()?,
            second_moment: step.second_moment.map(ParamVector::new).transpose()?,
            hyper: self.hyper,
        };
        Ok((params, next))
    }

    /// The aggregate this strategy would produce from `subset` alone, without
    /// touching the state. The empty coalition maps to the round-start global
    /// model; Krum on fewer than `f + 3` updates falls back to FedAvg.
    pub fn subset_combine(&self, subset: &[ClientUpdate]) -> Result<ParamVector> {
        if subset.is_empty() {
            return Ok(self.global_params.clone());
        }
        ParamVector::new(self.step(subset, true)?.params)
    }

    fn step(&self, updates: &[ClientUpdate], krum_fallback: bool) -> Result<Step> {
        let dim = self.global_params.len();
        for u in updates {
            if u.params.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: u.params.len(),
                });
            }
            if u.num_examples == 0 {
                return Err(Error::invalid(format!(
                    "client {} reports zero examples",
                    u.client_id
                )));
            }
        }
        // fixed summation order makes every rule independent of arrival order
        let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
        sorted.sort_by_key(|u| u.client_id);
        let updates = &sorted[..];

        let w = self.global_params.as_slice();
        let h = &self.hyper;
        let plain = |params| Step {
            params,
            momentum: None,
            second_moment: None,
        };
        Ok(match self.kind {
            StrategyKind::FedAvg => plain(weighted_mean(updates)),
            StrategyKind::FedMedian => plain(coordinate_median(updates)),
            StrategyKind::FedTrimAvg => plain(trimmed_mean(updates, h.trim_fraction)),
            StrategyKind::Krum => {
                if updates.len() < h.byzantine + 3 {
                    if !krum_fallback {
                        return Err(Error::KrumTooFewUpdates {
                            num_updates: updates.len(),
                            byzantine: h.byzantine,
                        });
                    }
                    plain(weighted_mean(updates))
                } else {
                    plain(krum_select(updates, h.byzantine).params.as_slice().to_vec())
                }
            }
            StrategyKind::FedAvgM => {
                let avg = weighted_mean(updates);
                let m_prev = self.buffer(&self.momentum);
                let m: Vec<f64> = m_prev
                    .iter()
                    .zip(w.iter().zip(&avg))
                    .map(|(m, (w, a))| h.server_momentum * m + (w - a))
                    .collect();
                // w - m rewritten as avg - beta * m_prev, so beta = 0 is exactly FedAvg
                let params = avg
                    .iter()
                    .zip(m_prev.iter())
                    .map(|(a, m)| a - h.server_momentum * m)
                    .collect();
                Step {
                    params,
                    momentum: Some(m),
                    second_moment: None,
                }
            }
            StrategyKind::FedAdagrad | StrategyKind::FedAdam | StrategyKind::FedYogi => {
                let delta = pseudo_gradient(updates, w);
                let m: Vec<f64> = if self.kind == StrategyKind::FedAdagrad {
                    delta.clone()
                } else {
                    self.buffer(&self.momentum)
                        .iter()
                        .zip(&delta)
                        .map(|(m, d)| h.beta1 * m + (1.0 - h.beta1) * d)
                        .collect()
                };
                let v: Vec<f64> = self
                    .buffer(&self.second_moment)
                    .iter()
                    .zip(&delta)
                    .map(|(v, d)| {
                        let d2 = d * d;
                        match self.kind {
                            StrategyKind::FedAdagrad => v + d2,
                            StrategyKind::FedAdam => h.beta2 * v + (1.0 - h.beta2) * d2,
                            _ => v - (1.0 - h.beta2) * d2 * sign(v - d2),
                        }
                    })
                    .collect();
                let params = w
                    .iter()
                    .zip(m.iter().zip(&v))
                    .map(|(w, (m, v))| w + h.eta * m / (v.max(0.0).sqrt() + h.tau))
                    .collect();
                Step {
                    params,
                    momentum: (self.kind != StrategyKind::FedAdagrad).then_some(m),
                    second_moment: Some(v),
                }
            }
        })
    }

    fn buffer(&self, b: &Option<ParamVector>) -> Vec<f64> {
        match b {
            Some(p) => p.as_slice().to_vec(),
            None => vec![0.0; self.global_params.len()],
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn weighted_mean(updates: &[&ClientUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.num_examples).sum();
    let mut out = vec![0.0; updates[0].params.len()];
    for u in updates {
        let weight = u.num_examples as f64 / total as f64;
        for (o, p) in out.iter_mut().zip(u.params.iter()) {
            *o += weight * p;
        }
    }
    out
}

fn pseudo_gradient(updates: &[&ClientUpdate], w: &[f64]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.num_examples).sum();
    let mut out = vec![0.0; w.len()];
    for u in updates {
        let weight = u.num_examples as f64 / total as f64;
        for ((o, p), g) in out.iter_mut().zip(u.params.iter()).zip(w) {
            *o += weight * (p - g);
        }
    }
    out
}

fn sorted_column(updates: &[&ClientUpdate], j: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(updates.iter().map(|u| u.params[j]));
    buf.sort_by(f64::total_cmp);
}

fn coordinate_median(updates: &[&ClientUpdate]) -> Vec<f64> {
    let n = updates.len();
    let mut col = Vec::with_capacity(n);
    (0..updates[0].params.len())
        .map(|j| {
            sorted_column(updates, j, &mut col);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect()
}

fn trimmed_mean(updates: &[&ClientUpdate], fraction: f64) -> Vec<f64> {
    let n = updates.len();
    let cut = ((fraction * n as f64).floor() as usize).min((n - 1) / 2);
    let mut col = Vec::with_capacity(n);
    (0..updates[0].params.len())
        .map(|j| {
            sorted_column(updates, j, &mut col);
            let kept = &col[cut..n - cut];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Update with the smallest sum of squared distances to its `K - f - 2`
/// nearest neighbours. `updates` is sorted by client id, so the first
/// minimum is the lowest id.
fn krum_select<'a>(updates: &[&'a ClientUpdate], byzantine: usize) -> &'a ClientUpdate {
    let n = updates.len();
    let neighbours = n - byzantine - 2;
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    let mut dists = Vec::with_capacity(n - 1);
    for i in 0..n {
        dists.clear();
        dists.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(&updates[i].params, &updates[j].params)),
        );
        dists.sort_by(f64::total_cmp);
        let score: f64 = dists[..neighbours].iter().sum();
        if score < best_score {
            best = i;
            best_score = score;
        }
    }
    updates[best]
}
