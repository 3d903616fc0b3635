#![allow(dead_code)]

use fedshap::data::Dataset;
use fedshap::model::{evaluate, init_model, loss_and_gradient, ModelSpec, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shapley values straight from the subset-sum definition, using integer
/// factorials and no caching: `v` is called afresh for every term.
pub fn brute_force_shapley(k: usize, v: &dyn Fn(u64) -> f64) -> Vec<f64> {
    let fact = |n: usize| -> f64 { (1..=n).map(|x| x as f64).product() };
    let k_fact = fact(k);
    (0..k)
        .map(|i| {
            let mut phi = 0.0;
            for s in 0..(1u64 << k) {
                if s & (1 << i) != 0 {
                    continue;
                }
                let size = s.count_ones() as usize;
                let weight = fact(size) * fact(k - size - 1) / k_fact;
                phi += weight * (v(s | (1 << i)) - v(s));
            }
            phi
        })
        .collect()
}

/// Random game on `k` players as a table indexed by coalition mask.
pub fn random_game(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..1usize << k)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn glove(s: u64) -> f64 {
    if s & 1 != 0 && s & 0b110 != 0 {
        1.0
    } else {
        0.0
    }
}

pub const DESK_CONFIG: &str = r#"
num_clients = 3
alphas = [1.0]
epochs_list = [2]
rounds = 20
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
strategies = ["fedavg", "fedavgm", "fedadagrad", "fedadam", "fedyogi", "fedmedian", "fedtrimavg", "krum"]
eval_fraction = 0.2

[task]
kind = "synthetic"
num_examples = 2000
num_classes = 10
input_dim = 20
cluster_spread = 1.0
seed = 42

[model]
hidden_dims = [16]

[train]
batch_size = 32
learning_rate = 0.01
"#;

/// A small grid that runs in well under a second.
pub fn small_config(strategies: &str, seeds: &str, rounds: usize) -> String {
    format!(
        r#"
num_clients = 3
alphas = [1.0]
epochs_list = [1]
rounds = {rounds}
seeds = {seeds}
strategies = {strategies}

[task]
kind = "synthetic"
num_examples = 300
num_classes = 3
input_dim = 4
cluster_spread = 1.0
seed = 5

[train]
batch_size = 16
learning_rate = 0.05
"#
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error between the analytic and numeric gradient of one random model.
pub fn gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let input = r.random_range(1..5);
    let hidden: Vec<usize> = (0..r.random_range(0..3))
        .map(|_| r.random_range(1..6))
        .collect();
    let classes = r.random_range(2..5);
    let spec = ModelSpec::new(input, hidden, classes).unwrap();
    let n = 8;
    let features = (0..n * input).map(|_| r.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|i| i % classes).collect();
    let data = Dataset::new(features, input, labels, classes).unwrap();
    let params = init_model(&spec, seed);
    let idx: Vec<usize> = (0..n).collect();
    let (_, analytic) = loss_and_gradient(&spec, &params, &data, &idx).unwrap();

    let h = 1e-4;
    let loss_at = |p: Vec<f64>| {
        evaluate(&spec, &ParamVector::new(p).unwrap(), &data)
            .unwrap()
            .loss
    };
    let numeric: Vec<f64> = (0..params.len())
        .map(|j| {
            let mut plus = params.as_slice().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            (loss_at(plus) - loss_at(minus)) / (2.0 * h)
        })
        .collect();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
}
