//! A small fully connected classifier: ReLU hidden layers, softmax
//! cross-entropy output, trained with plain minibatch SGD.
//!
//! Parameters are stored flat, layer by layer. Each layer holds its weight
//! matrix row-major as `[fan_out][fan_in]` followed by `fan_out` biases.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// Flat vector of finite model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "parameter {pos} is not finite ({})",
                values[pos]
            )));
        }
        Ok(ParamVector(values))
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.num_features() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: data.num_features(),
            });
        }
        if data.num_classes() > self.num_classes {
            return Err(Error::invalid(format!(
                "dataset has {} classes, model outputs {}",
                data.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean cross-entropy.
    pub loss: f64,
    pub accuracy: f64,
}

/// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, weights and
/// biases alike.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = rng::from_seed(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layers() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..(fan_in + 1) * fan_out {
            values.push(rng.random_range(-bound..=bound));
        }
    }
    ParamVector(values)
}

/// Per-call scratch space for forward and backward passes.
struct Scratch {
    /// Layer inputs; `acts[0]` is the example, `acts[l]` the ReLU output of layer `l - 1`.
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

struct Network<'a> {
    layers: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    params: &'a [f64],
}

impl<'a> Network<'a> {
    fn new(spec: &ModelSpec, params: &'a [f64]) -> Self {
        let layers = spec.layers();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut at = 0;
        for &(fan_in, fan_out) in &layers {
            offsets.push(at);
            at += (fan_in + 1) * fan_out;
        }
        Network {
            layers,
            offsets,
            params,
        }
    }

    fn scratch(&self) -> Scratch {
        let widest = self.layers.iter().map(|l| l.0.max(l.1)).max().unwrap_or(0);
        Scratch {
            acts: self
                .layers
                .iter()
                .map(|&(fan_in, _)| vec![0.0; fan_in])
                .collect(),
            logits: vec![0.0; self.layers.last().map_or(0, |l| l.1)],
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }

    fn forward(&self, x: &[f64], s: &mut Scratch) {
        s.acts[0].copy_from_slice(x);
        let last = self.layers.len() - 1;
        for (l, &(fan_in, fan_out)) in self.layers.iter().enumerate() {
            let w = &self.params[self.offsets[l]..self.offsets[l] + fan_in * fan_out];
            let b = &self.params[self.offsets[l] + fan_in * fan_out..][..fan_out];
            let (inputs, rest) = s.acts.split_at_mut(l + 1);
            let input = &inputs[l];
            let out: &mut [f64] = if l == last {
                &mut s.logits
            } else {
                &mut rest[0]
            };
            for (j, o) in out.iter_mut().enumerate() {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let z = b[j] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                *o = if l == last { z } else { z.max(0.0) };
            }
        }
    }

    /// Cross-entropy of the current logits; also leaves softmax in `delta`.
    fn cross_entropy(s: &mut Scratch, label: usize) -> f64 {
        let max = s.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        s.delta.clear();
        s.delta.extend(s.logits.iter().map(|z| (z - max).exp()));
        let sum: f64 = s.delta.iter().sum();
        let loss = sum.ln() + max - s.logits[label];
        for d in &mut s.delta {
            *d /= sum;
        }
        loss
    }

    /// Accumulates `scale * d loss / d params` for one example into `grad`.
    fn backward(&self, s: &mut Scratch, label: usize, scale: f64, grad: &mut [f64]) {
        s.delta[label] -= 1.0;
        for d in &mut s.delta {
            *d *= scale;
        }
        for l in (0..self.layers.len()).rev() {
            let (fan_in, fan_out) = self.layers[l];
            let off = self.offsets[l];
            let input = &s.acts[l];
            {
                let (gw, gb) =
                    grad[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for j in 0..fan_out {
                    let dj = s.delta[j];
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    for (g, a) in gw[j * fan_in..(j + 1) * fan_in].iter_mut().zip(input) {
                        *g += dj * a;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            s.delta_prev.clear();
            s.delta_prev.resize(fan_in, 0.0);
            for j in 0..fan_out {
                let dj = s.delta[j];
                if dj == 0.0 {
                    continue;
                }
                for (p, wv) in s
                    .delta_prev
                    .iter_mut()
                    .zip(&w[j * fan_in..(j + 1) * fan_in])
                {
                    *p += dj * wv;
                }
            }
            // ReLU mask: the input of layer l is the activation of layer l - 1
            for (p, a) in s.delta_prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            std::mem::swap(&mut s.delta, &mut s.delta_prev);
        }
    }

    fn argmax(logits: &[f64]) -> usize {
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Mean cross-entropy over `indices` and its gradient.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, Vec<f64>)> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let net = Network::new(spec, params);
    let mut s = net.scratch();
    let mut grad = vec![0.0; params.len()];
    let scale = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    for &i in indices {
        net.forward(data.row(i), &mut s);
        loss += Network::cross_entropy(&mut s, data.label(i));
        net.backward(&mut s, data.label(i), scale, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Runs `cfg.epochs` passes of minibatch SGD over `data`. The per-epoch
/// shuffle is drawn from `seed` only.
pub fn local_train(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ParamVector> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    cfg.validate()?;
    let mut weights = params.as_slice().to_vec();
    let mut rng = rng::from_seed(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; weights.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let net = Network::new(spec, &weights);
            let mut s = net.scratch();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                net.forward(data.row(i), &mut s);
                Network::cross_entropy(&mut s, data.label(i));
                net.backward(&mut s, data.label(i), scale, &mut grad);
            }
            for (w, g) in weights.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
    }
    ParamVector::new(weights).map_err(|_| Error::Diverged)
}

pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<EvalResult> {
    spec.check_params(params)?;
    spec.check_data(data)?;
    let net = Network::new(spec, params);
    let mut s = net.scratch();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        net.forward(data.row(i), &mut s);
        if Network::argmax(&s.logits) == data.label(i) {
            correct += 1;
        }
        loss += Network::cross_entropy(&mut s, data.label(i));
    }
    Ok(EvalResult {
        loss: (loss / data.len() as f64).max(0.0),
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Unweighted mean of per-client losses.
pub fn global_objective(
    spec: &ModelSpec,
    params: &ParamVector,
    clients: &[Dataset],
) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::invalid("no client datasets"));
    }
    let mut total = 0.0;
    for data in clients {
        total += evaluate(spec, params, data)?.loss;
    }
    Ok(total / clients.len() as f64)
}
