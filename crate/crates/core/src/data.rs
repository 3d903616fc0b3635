//! Datasets, synthetic task generation, Dirichlet size splits and IDX
//! (MNIST-style) file ingestion.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    num_features: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        num_features: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if num_features == 0 {
            return Err(Error::invalid("num_features must be positive"));
        }
        if features.len() != labels.len() * num_features {
            return Err(Error::invalid(format!(
                "{} feature values do not form {} rows of width {num_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Dataset {
            features,
            num_features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            num_features: self.num_features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub proportions: Vec<f64>,
    pub client_indices: Vec<Vec<usize>>,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }
}

/// One symmetric Dirichlet draw from normalised Gamma(alpha, 1) variates.
pub fn dirichlet_draw(rng: &mut ChaCha8Rng, alpha: f64, n: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if n < 1 {
        return Err(Error::invalid("dirichlet needs at least one component"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    // tiny alphas can underflow to zero; keep every share strictly positive
    let mut draw: Vec<f64> = (0..n)
        .map(|_| gamma.sample(rng).max(f64::MIN_POSITIVE))
        .collect();
    let sum: f64 = draw.iter().sum();
    for x in &mut draw {
        *x /= sum;
    }
    Ok(draw)
}

pub fn sample_dirichlet(alpha: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    dirichlet_draw(&mut rng::from_seed(seed), alpha, n)
}

impl PartitionSpec {
    pub fn sample_proportions(&self) -> Result<Vec<f64>> {
        sample_dirichlet(self.alpha, self.num_clients, self.seed)
    }
}

/// Deals every class's examples to clients in proportion to `proportions`.
///
/// Examples are visited class by class (input order within a class) and each
/// one goes to the client with the largest outstanding quota
/// `p_k * dealt - assigned_k`, lowest index on ties. Client totals stay within
/// one example of `p_k * N` and per-class counts within two of
/// `p_k * n_class`.
pub fn split_by_size(data: &Dataset, proportions: &[f64]) -> Result<PartitionPlan> {
    let k = proportions.len();
    if k == 0 {
        return Err(Error::invalid("no proportions"));
    }
    if proportions.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
        return Err(Error::invalid("proportions must be non-negative"));
    }
    let sum: f64 = proportions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("proportions sum to {sum}, not 1")));
    }
    let counts = data.class_counts();
    if let Some((class, &n)) = counts.iter().enumerate().find(|(_, &n)| n > 0 && n < k) {
        return Err(Error::invalid(format!(
            "too few examples: class {class} has {n} examples for {k} clients"
        )));
    }
    if data.len() < k {
        return Err(Error::invalid(format!(
            "too few examples: {} examples for {k} clients",
            data.len()
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut client_indices = vec![Vec::new(); k];
    let mut dealt = 0usize;
    for i in by_class.into_iter().flatten() {
        dealt += 1;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (c, p) in proportions.iter().enumerate() {
            let deficit = p * dealt as f64 - client_indices[c].len() as f64;
            if deficit > best_deficit {
                best = c;
                best_deficit = deficit;
            }
        }
        client_indices[best].push(i);
    }
    for idx in &mut client_indices {
        idx.sort_unstable();
    }
    Ok(PartitionPlan {
        proportions: proportions.to_vec(),
        client_indices,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_examples: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.num_examples < self.num_classes {
            return Err(Error::invalid("num_examples must be at least num_classes"));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::invalid("cluster_spread must be positive"));
        }
        Ok(())
    }
}

/// Gaussian blobs: one center per class on the sphere of radius
/// `3 * cluster_spread`, isotropic noise with std `cluster_spread`.
/// Example `i` belongs to class `i % num_classes`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::substream(spec.seed, "synthetic-centers", &[]);
    let radius = 3.0 * spec.cluster_spread;
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm * radius).collect();
            }
        })
        .collect();

    let mut rng = rng::substream(spec.seed, "synthetic-points", &[]);
    let mut features = Vec::with_capacity(spec.num_examples * spec.input_dim);
    let mut labels = Vec::with_capacity(spec.num_examples);
    for i in 0..spec.num_examples {
        let class = i % spec.num_classes;
        for c in &centers[class] {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(c + spec.cluster_spread * noise);
        }
        labels.push(class);
    }
    Dataset::new(features, spec.input_dim, labels, spec.num_classes)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Idx(format!("truncated file: {what} header")))
}

/// Parses an IDX image/label pair already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    if be_u32(images, 0, "images")? != IDX_IMAGES_MAGIC {
        return Err(Error::Idx("bad magic in images file".into()));
    }
    if be_u32(labels, 0, "labels")? != IDX_LABELS_MAGIC {
        return Err(Error::Idx("bad magic in labels file".into()));
    }
    let count = be_u32(images, 4, "images")? as usize;
    let rows = be_u32(images, 8, "images")? as usize;
    let cols = be_u32(images, 12, "images")? as usize;
    let label_count = be_u32(labels, 4, "labels")? as usize;
    if count != label_count {
        return Err(Error::Idx(format!(
            "count mismatch: {count} images, {label_count} labels"
        )));
    }
    let pixels = rows * cols;
    if pixels == 0 {
        return Err(Error::Idx("images have zero pixels".into()));
    }
    let body = &images[16..];
    if body.len() < count * pixels {
        return Err(Error::Idx(format!(
            "truncated file: expected {} pixel bytes, found {}",
            count * pixels,
            body.len()
        )));
    }
    let label_body = &labels[8..];
    if label_body.len() < count {
        return Err(Error::Idx(format!(
            "truncated file: expected {count} labels, found {}",
            label_body.len()
        )));
    }
    let features = body[..count * pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = label_body[..count]
        .iter()
        .map(|&b| usize::from(b))
        .collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, pixels, labels, num_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}
