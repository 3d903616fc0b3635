//! One federated run: partition, local training, per-round Shapley values
//! and server aggregation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, SubsetMode};
use crate::aggregation::{ClientUpdate, ServerState, StrategyKind};
use crate::contribution::RoundShapleyLog;
use crate::data::{sample_dirichlet, split_by_size, Dataset};
use crate::error::Result;
use crate::model::{
    evaluate, init_model, local_train, EvalResult, ModelSpec, ParamVector, TrainConfig,
};
use crate::rng::{substream, substream_seed};
use crate::shapley::{
    members, round_shapley, round_shapley_with, Coalition, RoundShapleyOptions, DEFAULT_EXACT_CAP,
};

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: StrategyKind,
    pub alpha: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Data as seen by one run: the server's utility split and the client shards.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub eval: Dataset,
    pub clients: Vec<Dataset>,
    /// Dirichlet draw before rounding.
    pub proportions: Vec<f64>,
}

impl FederatedData {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Dataset::len).collect()
    }
}

/// Carves the server evaluation split and deals the remainder to clients by
/// Dirichlet size shares. Depends only on `(alpha, seed)`, never on the
/// strategy, so every strategy sees the same federation.
pub fn prepare_data(
    config: &ExperimentConfig,
    base: &Dataset,
    alpha: f64,
    seed: u64,
) -> Result<FederatedData> {
    config.check_eval_split(base.len())?;
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut substream(seed, "eval-split", &[]));
    let eval_count = config.eval_count(base.len());
    let mut eval_idx = order[..eval_count].to_vec();
    let mut train_idx = order[eval_count..].to_vec();
    eval_idx.sort_unstable();
    train_idx.sort_unstable();
    let eval = base.select(&eval_idx);
    let pool = base.select(&train_idx);

    let proportions = sample_dirichlet(
        alpha,
        config.num_clients,
        substream_seed(seed, "partition", &[alpha.to_bits()]),
    )?;
    let plan = split_by_size(&pool, &proportions)?;
    let clients = plan
        .client_indices
        .iter()
        .map(|idx| pool.select(idx))
        .collect();
    Ok(FederatedData {
        eval,
        clients,
        proportions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub cell: Cell,
    pub proportions: Vec<f64>,
    pub client_sizes: Vec<usize>,
    pub eval_size: usize,
    pub initial_params: ParamVector,
    pub initial_eval: EvalResult,
    /// Global model after each round.
    pub global_params: Vec<ParamVector>,
    pub updates: Vec<Vec<ClientUpdate>>,
    pub shapley: RoundShapleyLog,
    /// Global model after each round, scored on the evaluation split.
    pub evals: Vec<EvalResult>,
    pub flags: Vec<String>,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn model_spec(config: &ExperimentConfig, data: &Dataset) -> Result<ModelSpec> {
    ModelSpec::new(
        data.num_features(),
        config.hidden_dims(),
        data.num_classes(),
    )
}

fn cell_fingerprint(config: &ExperimentConfig, cell: &Cell) -> String {
    let mut h = Sha256::new();
    h.update(config.fingerprint().as_bytes());
    h.update(
        serde_json::to_string(cell)
            .expect("cell serializes")
            .as_bytes(),
    );
    super::config::hex(&h.finalize())
}

/// Shadow optimizer states for the replay subset mode, indexed by coalition mask.
struct ReplayStates {
    states: Vec<ServerState>,
}

impl ReplayStates {
    fn new(initial: &ServerState, players: usize) -> Self {
        ReplayStates {
            states: vec![initial.clone(); 1 << players],
        }
    }

    /// Coalition models for this round and the advanced shadow states.
    fn round(
        &self,
        current: &ServerState,
        updates: &[ClientUpdate],
    ) -> Result<(Vec<ParamVector>, Vec<ServerState>)> {
        let mut models = Vec::with_capacity(self.states.len());
        let mut next = Vec::with_capacity(self.states.len());
        for (mask, shadow) in self.states.iter().enumerate() {
            if mask == 0 {
                models.push(current.global_params.clone());
                next.push(shadow.clone());
                continue;
            }
            let mut s = shadow.clone();
            s.global_params = current.global_params.clone();
            s.round = current.round;
            let (params, advanced) = s.combine(&members(updates, Coalition(mask as u64)))?;
            models.push(params);
            next.push(advanced);
        }
        Ok((models, next))
    }
}

/// Runs one cell end to end. Randomness comes from the named substreams
/// `eval-split`, `partition`, `init`, `client[k, t]` and `shapley[t]` of the
/// cell seed.
pub fn run_federation(config: &ExperimentConfig, base: &Dataset, cell: Cell) -> Result<RunRecord> {
    let data = prepare_data(config, base, cell.alpha, cell.seed)?;
    run_prepared(config, &data, base, cell)
}

pub(crate) fn run_prepared(
    config: &ExperimentConfig,
    data: &FederatedData,
    base: &Dataset,
    cell: Cell,
) -> Result<RunRecord> {
    let spec = model_spec(config, base)?;
    let train = TrainConfig {
        epochs: cell.epochs,
        batch_size: config.train.batch_size,
        learning_rate: config.train.learning_rate,
    };
    let sizes = data.sizes();
    let initial = init_model(&spec, substream_seed(cell.seed, "init", &[]));
    let initial_eval = evaluate(&spec, &initial, &data.eval)?;
    let mut state = ServerState::new(cell.strategy, initial.clone(), config.hyper);
    let replay = config.subset_mode == SubsetMode::Replay && cell.strategy.is_stateful();
    let mut shadows = replay.then(|| ReplayStates::new(&state, config.num_clients));

    let mut log = RoundShapleyLog::new(config.num_clients);
    let mut global_params = Vec::with_capacity(config.rounds);
    let mut all_updates = Vec::with_capacity(config.rounds);
    let mut evals = Vec::with_capacity(config.rounds);

    for t in 0..config.rounds {
        let updates = data
            .clients
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                let seed = substream_seed(cell.seed, "client", &[k as u64, t as u64]);
                Ok(ClientUpdate {
                    client_id: k,
                    params: local_train(&spec, &state.global_params, shard, &train, seed)?,
                    num_examples: sizes[k],
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let opts = RoundShapleyOptions {
            mode: config.shapley_mode,
            utility: config.utility,
            exact_cap: DEFAULT_EXACT_CAP,
            seed: substream_seed(cell.seed, "shapley", &[t as u64]),
        };
        let phi = match shadows.as_mut() {
            None => round_shapley(&spec, &state, &updates, &data.eval, &opts)?,
            Some(shadow) => {
                let (models, next) = shadow.round(&state, &updates)?;
                let phi = round_shapley_with(&spec, updates.len(), &data.eval, &opts, |c| {
                    Ok(models[c.0 as usize].clone())
                })?;
                shadow.states = next;
                phi
            }
        };
        log.push(phi)?;

        let (params, next) = state.combine(&updates)?;
        state = next;
        evals.push(evaluate(&spec, &params, &data.eval)?);
        global_params.push(params);
        all_updates.push(updates);
    }

    Ok(RunRecord {
        fingerprint: cell_fingerprint(config, &cell),
        cell,
        proportions: data.proportions.clone(),
        client_sizes: sizes,
        eval_size: data.eval.len(),
        initial_params: initial,
        initial_eval,
        global_params,
        updates: all_updates,
        shapley: log,
        evals,
        flags: Vec::new(),
    })
}
