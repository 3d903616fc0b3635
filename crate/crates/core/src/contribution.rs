//! From per-round Shapley values to final percentage contributions.

use serde::{Deserialize, Serialize};

use crate::analysis::sq_euclid;
use crate::error::{Error, Result};
use crate::shapley::ShapleyVector;

/// Per-round Shapley values of one run; `rounds[0]` is the first round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundShapleyLog {
    pub rounds: Vec<ShapleyVector>,
    pub num_clients: usize,
}

impl RoundShapleyLog {
    pub fn new(num_clients: usize) -> Self {
        RoundShapleyLog {
            rounds: Vec::new(),
            num_clients,
        }
    }

    pub fn from_rounds(rounds: Vec<ShapleyVector>) -> Result<Self> {
        let num_clients = rounds.first().map_or(0, ShapleyVector::len);
        let mut log = RoundShapleyLog::new(num_clients);
        for r in rounds {
            log.push(r)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, round: ShapleyVector) -> Result<()> {
        if round.len() != self.num_clients {
            return Err(Error::DimensionMismatch {
                expected: self.num_clients,
                actual: round.len(),
            });
        }
        self.rounds.push(round);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionVector {
    pub percentages: Vec<f64>,
    pub raw: Vec<f64>,
}

impl ContributionVector {
    /// True when some client ended with a negative share.
    pub fn has_negative(&self) -> bool {
        self.percentages.iter().any(|&p| p < 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub percentages: Vec<f64>,
}

/// `phi_k(R) = sum_{t=0}^{R} (R - t) / R * phi_k^t`.
///
/// Index `t = R` carries weight zero, so only the first `R` rounds matter.
/// The sum is accumulated with integer weights and divided by `R` once.
pub fn weighted_cumulative(log: &RoundShapleyLog, halting_round: usize) -> Result<Vec<f64>> {
    if halting_round < 1 {
        return Err(Error::invalid("halting round must be at least 1"));
    }
    if halting_round > log.len() {
        return Err(Error::invalid(format!(
            "halting round {halting_round} exceeds the {} recorded rounds",
            log.len()
        )));
    }
    let r = halting_round;
    let mut raw = vec![0.0; log.num_clients];
    for (t, round) in log.rounds.iter().enumerate().take(r) {
        let weight = (r - t) as f64;
        for (acc, phi) in raw.iter_mut().zip(&round.values) {
            *acc += weight * phi;
        }
    }
    for acc in &mut raw {
        *acc /= r as f64;
    }
    Ok(raw)
}

/// Percentages `raw_k / sum(raw)`; fails when the sum is not positive.
pub fn normalize(raw: &[f64]) -> Result<ContributionVector> {
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(Error::NonNormalizable {
            raw: raw.to_vec(),
            sum,
        });
    }
    Ok(ContributionVector {
        percentages: raw.iter().map(|x| x / sum).collect(),
        raw: raw.to_vec(),
    })
}

/// Size-proportional payout `n_k / sum(n)`.
pub fn ground_truth(sizes: &[usize]) -> Result<GroundTruth> {
    if sizes.is_empty() {
        return Err(Error::invalid("no client sizes"));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("client sizes must be positive"));
    }
    let total: usize = sizes.iter().sum();
    Ok(GroundTruth {
        percentages: sizes.iter().map(|&n| n as f64 / total as f64).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HaltingChoice {
    pub halting_round: usize,
    pub distance: f64,
}

/// Halting round in `1..=log.len()` whose normalised contribution is closest
/// (squared Euclidean) to `truth`. Non-normalizable candidates are skipped and
/// ties resolve to the smaller round.
pub fn optimal_halting_round(log: &RoundShapleyLog, truth: &GroundTruth) -> Result<HaltingChoice> {
    if log.is_empty() {
        return Err(Error::invalid("empty Shapley log"));
    }
    let mut best: Option<HaltingChoice> = None;
    for r in 1..=log.len() {
        let Ok(contribution) = normalize(&weighted_cumulative(log, r)?) else {
            continue;
        };
        let distance = sq_euclid(&contribution.percentages, &truth.percentages)?;
        if best.is_none_or(|b| distance < b.distance) {
            best = Some(HaltingChoice {
                halting_round: r,
                distance,
            });
        }
    }
    best.ok_or_else(|| Error::NonNormalizable {
        raw: vec![],
        sum: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(rounds: &[&[f64]]) -> RoundShapleyLog {
        RoundShapleyLog::from_rounds(
            rounds
                .iter()
                .map(|r| ShapleyVector { values: r.to_vec() })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn first_round_has_full_weight() {
        let l = log(&[&[0.3, 0.1], &[5.0, 7.0]]);
        assert_eq!(weighted_cumulative(&l, 1).unwrap(), vec![0.3, 0.1]);
        // R = 2: 2/2 * round0 + 1/2 * round1
        assert_eq!(
            weighted_cumulative(&l, 2).unwrap(),
            vec![0.3 + 2.5, 0.1 + 3.5]
        );
    }

    #[test]
    fn ten_round_weights() {
        // unit impulse in round t recovers that round's weight
        for t in 0..10 {
            let mut rounds = vec![vec![0.0]; 10];
            rounds[t][0] = 1.0;
            let refs: Vec<&[f64]> = rounds.iter().map(Vec::as_slice).collect();
            let w = weighted_cumulative(&log(&refs), 10).unwrap()[0];
            assert_eq!(w, (10 - t) as f64 / 10.0);
        }
    }

    #[test]
    fn halting_round_bounds() {
        let l = log(&[&[1.0], &[1.0]]);
        assert!(weighted_cumulative(&l, 0).is_err());
        assert!(weighted_cumulative(&l, 3).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize(&[1.0, 1.0, 2.0]).unwrap().percentages,
            vec![0.25, 0.25, 0.5]
        );
        assert_eq!(normalize(&[5.0]).unwrap().percentages, vec![1.0]);
        let neg = normalize(&[-1.0, 3.0]).unwrap();
        assert_eq!(neg.percentages, vec![-0.5, 1.5]);
        assert!(neg.has_negative());
        match normalize(&[-1.0, 0.5]) {
            Err(Error::NonNormalizable { raw, .. }) => assert_eq!(raw, vec![-1.0, 0.5]),
            other => panic!("{other:?}"),
        }
        assert!(normalize(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn ground_truth_examples() {
        assert_eq!(ground_truth(&[1, 3]).unwrap().percentages, vec![0.25, 0.75]);
        assert_eq!(
            ground_truth(&[4, 4, 4, 4]).unwrap().percentages,
            vec![0.25; 4]
        );
        assert_eq!(
            ground_truth(&[10000, 15000, 25000]).unwrap().percentages,
            vec![0.2, 0.3, 0.5]
        );
        assert!(ground_truth(&[]).is_err());
        assert!(ground_truth(&[3, 0]).is_err());
    }

    #[test]
    fn single_round_log_halts_at_one() {
        let truth = ground_truth(&[1, 1]).unwrap();
        let choice = optimal_halting_round(&log(&[&[0.2, 0.9]]), &truth).unwrap();
        assert_eq!(choice.halting_round, 1);
    }

    #[test]
    fn skips_non_normalizable_candidates() {
        let truth = ground_truth(&[1, 1]).unwrap();
        // R = 1 sums to -1, R = 2 sums to positive
        let l = log(&[&[-0.5, -0.5], &[3.0, 3.0]]);
        assert_eq!(optimal_halting_round(&l, &truth).unwrap().halting_round, 2);
        let all_bad = log(&[&[-0.5, -0.5], &[-3.0, 3.0]]);
        assert!(optimal_halting_round(&all_bad, &truth).is_err());
    }

    #[test]
    fn log_rejects_ragged_rounds() {
        let mut l = RoundShapleyLog::new(2);
        assert!(l.push(ShapleyVector { values: vec![1.0] }).is_err());
    }
}
