//! Engines checked against independently written enumerators.

mod common;

use common::{brute_force_shapley, glove, random_game, rng};
use fedshap::aggregation::{ClientUpdate, ServerState, StrategyKind};
use fedshap::model::{evaluate, ModelSpec, ParamVector};
use fedshap::runner::federation::{prepare_data, run_federation, Cell};
use fedshap::runner::ExperimentConfig;
use fedshap::shapley::{
    exact_shapley, monte_carlo_shapley, round_shapley, CharacteristicFn, RoundShapleyOptions,
    DEFAULT_EXACT_CAP,
};
use fedshap::Result;

fn table_game(
    table: Vec<f64>,
    k: usize,
) -> CharacteristicFn<impl Fn(fedshap::Coalition) -> Result<f64> + Sync> {
    CharacteristicFn::new(k, move |s| Ok(table[s.0 as usize]))
}

#[test]
fn brute_force_reproduces_known_games() {
    let phi = brute_force_shapley(3, &glove);
    assert!((phi[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((phi[1] - 1.0 / 6.0).abs() < 1e-15);
    // brute force on glove matches averaging marginals over all 6 orderings
    let orders = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut avg = [0.0; 3];
    for o in orders {
        let mut s = 0u64;
        for p in o {
            avg[p] += (glove(s | 1 << p) - glove(s)) / 6.0;
            s |= 1 << p;
        }
    }
    for (a, b) in avg.iter().zip(&phi) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn exact_matches_brute_force_on_random_games() {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let k = 1 + trial % 6;
        let table = random_game(&mut r, k);
        let expected = brute_force_shapley(k, &|s| table[s as usize]);
        let got = exact_shapley(&table_game(table.clone(), k), DEFAULT_EXACT_CAP).unwrap();
        for (a, b) in got.values.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-10, "max deviation {worst}");
}

#[test]
fn monte_carlo_glove_converges() {
    let v = CharacteristicFn::new(3, |s| Ok(glove(s.0)));
    let mc = monte_carlo_shapley(&v, 20_000, 17).unwrap();
    for (a, b) in mc.values.iter().zip([2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0]) {
        assert!((a - b).abs() < 0.02, "{a} vs {b}");
    }
}

fn update(id: usize, params: &[f64], n: usize) -> ClientUpdate {
    ClientUpdate {
        client_id: id,
        params: ParamVector::new(params.to_vec()).unwrap(),
        num_examples: n,
    }
}

#[test]
fn krum_scores_by_enumeration() {
    // score(k) = sum of squared distances to the K - f - 2 = 2 nearest others
    let xs = [0.0f64, 0.1, 0.2, 10.0];
    let scores: Vec<f64> = (0..4)
        .map(|i| {
            let mut d: Vec<f64> = (0..4)
                .filter(|&j| j != i)
                .map(|j| (xs[i] - xs[j]).powi(2))
                .collect();
            d.sort_by(f64::total_cmp);
            d[0] + d[1]
        })
        .collect();
    assert!((scores[0] - 0.05).abs() < 1e-12);
    assert!((scores[1] - 0.02).abs() < 1e-12);
    assert!((scores[2] - 0.05).abs() < 1e-12);
    assert!(scores[3] > 1.0);
    let ups: Vec<_> = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| update(i, &[x], 1))
        .collect();
    let state = ServerState::new(
        StrategyKind::Krum,
        ParamVector::zeros(1),
        Default::default(),
    );
    assert_eq!(state.combine(&ups).unwrap().0.as_slice(), &[0.1]);
}

fn fedavg_by_hand(updates: &[&ClientUpdate]) -> Vec<f64> {
    let n: usize = updates.iter().map(|u| u.num_examples).sum();
    let mut out = vec![0.0; updates[0].params.len()];
    for u in updates {
        for (o, p) in out.iter_mut().zip(u.params.iter()) {
            *o += u.num_examples as f64 / n as f64 * p;
        }
    }
    out
}

#[test]
fn round_shapley_matches_direct_enumeration() {
    // logistic model on a tiny dataset, three constructed client models
    let spec = ModelSpec::new(2, vec![], 2).unwrap();
    let features = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.2, 0.1, 1.0, 0.6, 0.5, 0.4, 0.7];
    let labels = vec![0, 1, 0, 1, 0, 1];
    let eval = fedshap::Dataset::new(features, 2, labels, 2).unwrap();
    let global = ParamVector::zeros(spec.param_count());
    let ups = vec![
        update(0, &[1.0, -1.0, -1.0, 1.0, 0.0, 0.0], 50),
        update(1, &[-0.5, 0.5, 0.2, -0.2, 0.1, 0.0], 30),
        update(2, &[0.3, -0.1, -0.4, 0.9, 0.0, 0.2], 20),
    ];
    let state = ServerState::new(StrategyKind::FedAvg, global.clone(), Default::default());
    let v = |s: u64| -> f64 {
        let members: Vec<&ClientUpdate> = (0..3)
            .filter(|i| s & (1 << i) != 0)
            .map(|i| &ups[i])
            .collect();
        let params = if members.is_empty() {
            global.clone()
        } else {
            ParamVector::new(fedavg_by_hand(&members)).unwrap()
        };
        evaluate(&spec, &params, &eval).unwrap().accuracy
    };
    let expected = brute_force_shapley(3, &v);
    let got = round_shapley(&spec, &state, &ups, &eval, &RoundShapleyOptions::default()).unwrap();
    for (a, b) in got.values.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let full = v(0b111) - v(0);
    assert!((got.sum() - full).abs() < 1e-9);
}

#[test]
fn identical_updates_get_equal_shares() {
    let spec = ModelSpec::new(2, vec![], 2).unwrap();
    let eval = fedshap::Dataset::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], 2).unwrap();
    let p = [1.0, -1.0, -1.0, 1.0, 0.0, 0.0];
    let ups: Vec<_> = (0..4).map(|i| update(i, &p, 10 + i)).collect();
    for kind in StrategyKind::ALL {
        let state = ServerState::new(kind, ParamVector::zeros(6), Default::default());
        let phi =
            round_shapley(&spec, &state, &ups, &eval, &RoundShapleyOptions::default()).unwrap();
        for x in &phi.values {
            assert_eq!(*x, phi.values[0], "{kind}");
        }
    }
}

#[test]
fn recorded_run_replays_through_independent_enumerator() {
    let text = common::small_config("[\"fedavg\"]", "[7]", 5);
    let config = ExperimentConfig::from_toml_str(&text).unwrap();
    let base = config.task.load().unwrap();
    let cell = Cell {
        strategy: StrategyKind::FedAvg,
        alpha: 1.0,
        epochs: 1,
        seed: 7,
    };
    let record = run_federation(&config, &base, cell).unwrap();
    let data = prepare_data(&config, &base, 1.0, 7).unwrap();
    let spec = ModelSpec::new(base.num_features(), vec![], base.num_classes()).unwrap();
    assert_eq!(record.shapley.len(), 5);
    for (t, round_updates) in record.updates.iter().enumerate() {
        let start = if t == 0 {
            record.initial_params.clone()
        } else {
            record.global_params[t - 1].clone()
        };
        let v = |s: u64| -> f64 {
            let members: Vec<&ClientUpdate> = (0..3)
                .filter(|i| s & (1 << i) != 0)
                .map(|i| &round_updates[i])
                .collect();
            let params = if members.is_empty() {
                start.clone()
            } else {
                ParamVector::new(fedavg_by_hand(&members)).unwrap()
            };
            evaluate(&spec, &params, &data.eval).unwrap().accuracy
        };
        let expected = brute_force_shapley(3, &v);
        for (a, b) in record.shapley.rounds[t].values.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "round {t}: {a} vs {b}");
        }
    }
}
