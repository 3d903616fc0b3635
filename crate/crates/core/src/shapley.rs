//! Shapley values over coalitions of players encoded as bitmasks.
//!
//! [`exact_shapley`] enumerates every coalition; [`monte_carlo_shapley`]
//! averages marginal contributions along random player orderings. Both query
//! the characteristic function through a memo cache, so each coalition is
//! evaluated at most once. [`round_shapley`] is the per-round federated
//! adapter: the value of a coalition is the utility of the model its updates
//! aggregate to.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{ClientUpdate, ServerState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{evaluate, ModelSpec, ParamVector};
use crate::rng;

/// Largest player count accepted by the exact engine by default.
pub const DEFAULT_EXACT_CAP: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Coalition(pub u64);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn full(players: usize) -> Self {
        Coalition(if players >= 64 {
            u64::MAX
        } else {
            (1u64 << players) - 1
        })
    }

    pub fn contains(self, player: usize) -> bool {
        self.0 & (1 << player) != 0
    }

    pub fn with(self, player: usize) -> Self {
        Coalition(self.0 | (1 << player))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&i| self.0 & (1 << i) != 0)
    }
}

/// A memoised characteristic function `v(S)`.
///
/// The oracle must be deterministic. The cache admits concurrent readers;
/// an insertion happens once per coalition.
pub struct CharacteristicFn<F> {
    players: usize,
    oracle: F,
    cache: RwLock<HashMap<Coalition, f64>>,
    evaluations: AtomicUsize,
}

impl<F> CharacteristicFn<F>
where
    F: Fn(Coalition) -> Result<f64> + Sync,
{
    pub fn new(players: usize, oracle: F) -> Self {
        CharacteristicFn {
            players,
            oracle,
            cache: RwLock::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
        }
    }

    pub fn players(&self) -> usize {
        self.players
    }

    /// Number of times the underlying oracle has run.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn value(&self, coalition: Coalition) -> Result<f64> {
        if let Some(&v) = self.cache.read().expect("cache poisoned").get(&coalition) {
            return Ok(v);
        }
        let mut cache = self.cache.write().expect("cache poisoned");
        if let Some(&v) = cache.get(&coalition) {
            return Ok(v);
        }
        let v = (self.oracle)(coalition)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        cache.insert(coalition, v);
        Ok(v)
    }

    /// Evaluates every coalition, in parallel, returning values indexed by mask.
    fn all_values(&self) -> Result<Vec<f64>> {
        let masks: Vec<u64> = (0..1u64 << self.players).collect();
        let missing: Vec<u64> = {
            let cache = self.cache.read().expect("cache poisoned");
            masks
                .iter()
                .copied()
                .filter(|m| !cache.contains_key(&Coalition(*m)))
                .collect()
        };
        // oracle calls run outside the lock; results are inserted afterwards
        let fresh: Vec<(u64, f64)> = missing
            .par_iter()
            .map(|&m| (self.oracle)(Coalition(m)).map(|v| (m, v)))
            .collect::<Result<_>>()?;
        {
            let mut cache = self.cache.write().expect("cache poisoned");
            for (m, v) in fresh {
                if cache.insert(Coalition(m), v).is_none() {
                    self.evaluations.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        let cache = self.cache.read().expect("cache poisoned");
        Ok(masks.iter().map(|m| cache[&Coalition(*m)]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapleyVector {
    pub values: Vec<f64>,
}

impl ShapleyVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `|S|! (K - |S| - 1)! / K!` for every coalition size `|S|` in `0..K`.
fn coalition_weights(players: usize) -> Vec<f64> {
    // 1 / (K * C(K-1, s)), with the binomial built incrementally
    let mut binom = 1.0f64;
    (0..players)
        .map(|s| {
            if s > 0 {
                binom = binom * (players - s) as f64 / s as f64;
            }
            1.0 / (players as f64 * binom)
        })
        .collect()
}

pub fn exact_shapley<F>(v: &CharacteristicFn<F>, cap: usize) -> Result<ShapleyVector>
where
    F: Fn(Coalition) -> Result<f64> + Sync,
{
    let k = v.players();
    if k > cap || k >= 64 {
        return Err(Error::TooManyPlayers { players: k, cap });
    }
    if k == 0 {
        return Ok(ShapleyVector { values: vec![] });
    }
    let values = v.all_values()?;
    let weights = coalition_weights(k);
    let phi = (0..k)
        .map(|i| {
            let bit = 1u64 << i;
            (0..1u64 << k)
                .filter(|m| m & bit == 0)
                .map(|m| {
                    weights[m.count_ones() as usize]
                        * (values[(m | bit) as usize] - values[m as usize])
                })
                .sum()
        })
        .collect();
    Ok(ShapleyVector { values: phi })
}

/// Mean marginal contribution over `num_permutations` uniformly random
/// player orderings drawn from `seed`.
pub fn monte_carlo_shapley<F>(
    v: &CharacteristicFn<F>,
    num_permutations: usize,
    seed: u64,
) -> Result<ShapleyVector>
where
    F: Fn(Coalition) -> Result<f64> + Sync,
{
    if num_permutations == 0 {
        return Err(Error::invalid("num_permutations must be positive"));
    }
    let k = v.players();
    let mut rng = rng::from_seed(seed);
    let mut order: Vec<usize> = (0..k).collect();
    let mut totals = vec![0.0; k];
    let empty = v.value(Coalition::EMPTY)?;
    for _ in 0..num_permutations {
        order.shuffle(&mut rng);
        let mut coalition = Coalition::EMPTY;
        let mut previous = empty;
        for &player in &order {
            coalition = coalition.with(player);
            let current = v.value(coalition)?;
            totals[player] += current - previous;
            previous = current;
        }
    }
    let n = num_permutations as f64;
    Ok(ShapleyVector {
        values: totals.into_iter().map(|t| t / n).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMode {
    Exact,
    MonteCarlo { num_permutations: usize },
}

/// What a coalition's aggregated model is scored by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    #[default]
    Accuracy,
    NegativeLoss,
}

impl UtilityKind {
    pub fn score(self, spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
        let r = evaluate(spec, params, data)?;
        Ok(match self {
            UtilityKind::Accuracy => r.accuracy,
            UtilityKind::NegativeLoss => -r.loss,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundShapleyOptions {
    pub mode: ShapleyMode,
    pub utility: UtilityKind,
    pub exact_cap: usize,
    /// Seed for the Monte Carlo engine.
    pub seed: u64,
}

impl Default for RoundShapleyOptions {
    fn default() -> Self {
        RoundShapleyOptions {
            mode: ShapleyMode::Exact,
            utility: UtilityKind::Accuracy,
            exact_cap: DEFAULT_EXACT_CAP,
            seed: 0,
        }
    }
}

/// Runs the selected engine on a characteristic function.
pub fn shapley_values<F>(
    v: &CharacteristicFn<F>,
    opts: &RoundShapleyOptions,
) -> Result<ShapleyVector>
where
    F: Fn(Coalition) -> Result<f64> + Sync,
{
    match opts.mode {
        ShapleyMode::Exact => exact_shapley(v, opts.exact_cap),
        ShapleyMode::MonteCarlo { num_permutations } => {
            monte_carlo_shapley(v, num_permutations, opts.seed)
        }
    }
}

pub(crate) fn members(updates: &[ClientUpdate], coalition: Coalition) -> Vec<ClientUpdate> {
    coalition
        .members()
        .take_while(|&i| i < updates.len())
        .map(|i| updates[i].clone())
        .collect()
}

/// Per-round Shapley values of `updates` against the frozen round-start
/// `state`. Player `i` is `updates[i]`; `v(S)` is the utility of
/// `state.subset_combine(S)` on `eval_data`.
pub fn round_shapley(
    spec: &ModelSpec,
    state: &ServerState,
    updates: &[ClientUpdate],
    eval_data: &Dataset,
    opts: &RoundShapleyOptions,
) -> Result<ShapleyVector> {
    round_shapley_with(spec, updates.len(), eval_data, opts, |coalition| {
        state.subset_combine(&members(updates, coalition))
    })
}

/// Like [`round_shapley`] with a caller-supplied coalition model.
pub fn round_shapley_with<M>(
    spec: &ModelSpec,
    players: usize,
    eval_data: &Dataset,
    opts: &RoundShapleyOptions,
    coalition_model: M,
) -> Result<ShapleyVector>
where
    M: Fn(Coalition) -> Result<ParamVector> + Sync,
{
    let v = CharacteristicFn::new(players, |coalition| {
        let params = coalition_model(coalition)?;
        opts.utility.score(spec, &params, eval_data)
    });
    shapley_values(&v, opts)
}
