//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{Hyper, StrategyKind};
use crate::data::{generate_synthetic, load_idx, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::shapley::{ShapleyMode, UtilityKind, DEFAULT_EXACT_CAP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    Synthetic {
        #[serde(default)]
        name: Option<String>,
        num_examples: usize,
        num_classes: usize,
        input_dim: usize,
        cluster_spread: f64,
        seed: u64,
    },
    Idx {
        #[serde(default)]
        name: Option<String>,
        images: PathBuf,
        labels: PathBuf,
    },
}

impl TaskConfig {
    pub fn name(&self) -> String {
        match self {
            TaskConfig::Synthetic { name, .. } => {
                name.clone().unwrap_or_else(|| "synthetic".into())
            }
            TaskConfig::Idx { name, images, .. } => name.clone().unwrap_or_else(|| {
                images
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "idx".into())
            }),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            TaskConfig::Synthetic {
                num_examples,
                num_classes,
                input_dim,
                cluster_spread,
                seed,
                ..
            } => generate_synthetic(&SyntheticSpec {
                num_examples: *num_examples,
                num_classes: *num_classes,
                input_dim: *input_dim,
                cluster_spread: *cluster_spread,
                seed: *seed,
            }),
            TaskConfig::Idx { images, labels, .. } => load_idx(images, labels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum AutoKeyword {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum HaltingRepr {
    Round(usize),
    Keyword(AutoKeyword),
}

/// Halting round used for the reported contributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "HaltingRepr", into = "HaltingRepr")]
pub enum HaltingSetting {
    Round(usize),
    /// Each strategy's mean optimal round across seeds.
    Auto,
}

impl From<HaltingRepr> for HaltingSetting {
    fn from(r: HaltingRepr) -> Self {
        match r {
            HaltingRepr::Round(n) => HaltingSetting::Round(n),
            HaltingRepr::Keyword(AutoKeyword::Auto) => HaltingSetting::Auto,
        }
    }
}

impl From<HaltingSetting> for HaltingRepr {
    fn from(h: HaltingSetting) -> Self {
        match h {
            HaltingSetting::Round(n) => HaltingRepr::Round(n),
            HaltingSetting::Auto => HaltingRepr::Keyword(AutoKeyword::Auto),
        }
    }
}

/// How coalition models are formed for stateful server optimizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetMode {
    /// One optimizer step from the frozen round-start moments.
    #[default]
    Frozen,
    /// Each coalition keeps its own moment buffers, advanced every round by
    /// its own pseudo-gradient.
    Replay,
}

fn default_eval_fraction() -> f64 {
    0.2
}

fn default_parallel() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub num_clients: usize,
    pub alphas: Vec<f64>,
    pub epochs_list: Vec<usize>,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub strategies: Vec<StrategyKind>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub train: TrainSettings,
    #[serde(default = "default_shapley_mode")]
    pub shapley_mode: ShapleyMode,
    #[serde(default)]
    pub utility: UtilityKind,
    #[serde(default)]
    pub subset_mode: SubsetMode,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub halting_round: Option<HaltingSetting>,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_shapley_mode() -> ShapleyMode {
    ShapleyMode::Exact
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative IDX paths resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let TaskConfig::Idx { images, labels, .. } = &mut config.task {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.model
            .as_ref()
            .map(|m| m.hidden_dims.clone())
            .unwrap_or_default()
    }

    pub fn halting(&self) -> HaltingSetting {
        self.halting_round
            .unwrap_or(HaltingSetting::Round(self.rounds))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.rounds < 1 {
            return bad("rounds must be at least 1".into());
        }
        if self.num_clients < 2 {
            return bad("num_clients must be at least 2".into());
        }
        if self.alphas.is_empty() || self.epochs_list.is_empty() || self.seeds.is_empty() {
            return bad("alphas, epochs_list and seeds must be non-empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return bad(format!("alpha {a} is not positive"));
        }
        if self.strategies.is_empty() {
            return bad("strategies must be non-empty".into());
        }
        let mut seen = self.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.strategies.len() {
            return bad("strategies contain duplicates".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!(
                "eval_fraction {} outside (0, 1)",
                self.eval_fraction
            ));
        }
        if self.train.batch_size == 0
            || !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite())
        {
            return bad("train.batch_size and train.learning_rate must be positive".into());
        }
        self.hyper
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.hidden_dims().contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        match self.shapley_mode {
            ShapleyMode::Exact if self.num_clients > DEFAULT_EXACT_CAP => {
                return bad(format!(
                    "exact Shapley supports at most {DEFAULT_EXACT_CAP} clients; use monte_carlo"
                ))
            }
            ShapleyMode::MonteCarlo {
                num_permutations: 0,
            } => return bad("num_permutations must be positive".into()),
            _ => {}
        }
        if self.strategies.contains(&StrategyKind::Krum)
            && self.num_clients < self.hyper.byzantine + 3
        {
            return bad(format!(
                "krum needs num_clients >= byzantine + 3 (got {} clients, f = {})",
                self.num_clients, self.hyper.byzantine
            ));
        }
        if let Some(HaltingSetting::Round(r)) = self.halting_round {
            if r < 1 || r > self.rounds {
                return bad(format!("halting_round {r} outside 1..={}", self.rounds));
            }
        }
        if let TaskConfig::Synthetic {
            num_examples,
            num_classes,
            input_dim,
            cluster_spread,
            seed,
            ..
        } = &self.task
        {
            SyntheticSpec {
                num_examples: *num_examples,
                num_classes: *num_classes,
                input_dim: *input_dim,
                cluster_spread: *cluster_spread,
                seed: *seed,
            }
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
            self.check_eval_split(*num_examples)?;
        }
        Ok(())
    }

    /// Number of examples held out for the server utility.
    pub fn eval_count(&self, total: usize) -> usize {
        ((self.eval_fraction * total as f64).round() as usize).clamp(1, total.saturating_sub(1))
    }

    pub(crate) fn check_eval_split(&self, total: usize) -> Result<()> {
        if total < 2 {
            return Err(Error::Config("task has fewer than 2 examples".into()));
        }
        let train = total - self.eval_count(total);
        if train < self.num_clients {
            return Err(Error::Config(format!(
                "{train} training examples cannot feed {} clients",
                self.num_clients
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the config.
    /// Hash of everything that determines results; `parallel` is excluded.
    pub fn fingerprint(&self) -> String {
        let canonical = ExperimentConfig {
            parallel: true,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
num_clients = 3
alphas = [1.0, 10.0]
epochs_list = [2]
rounds = 5
seeds = [0, 1]
strategies = ["fedavg", "krum"]

[task]
kind = "synthetic"
num_examples = 200
num_classes = 4
input_dim = 5
cluster_spread = 1.0
seed = 3

[train]
batch_size = 16
learning_rate = 0.05
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml_str(BASE).unwrap();
        assert_eq!(c.strategies, vec![StrategyKind::FedAvg, StrategyKind::Krum]);
        assert_eq!(c.shapley_mode, ShapleyMode::Exact);
        assert_eq!(c.eval_fraction, 0.2);
        assert_eq!(c.halting(), HaltingSetting::Round(5));
        assert_eq!(c.hyper, Hyper::default());
        assert_eq!(c.task.name(), "synthetic");
    }

    #[test]
    fn parses_optional_sections() {
        let text = format!(
            "halting_round = \"auto\"\nsubset_mode = \"replay\"\nshapley_mode = {{ monte_carlo = {{ num_permutations = 50 }} }}\n{BASE}\n[hyper]\neta = 0.5\n\n[model]\nhidden_dims = [8]\n"
        );
        let c = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.halting(), HaltingSetting::Auto);
        assert_eq!(
            c.shapley_mode,
            ShapleyMode::MonteCarlo {
                num_permutations: 50
            }
        );
        assert_eq!(c.subset_mode, SubsetMode::Replay);
        assert_eq!(c.hyper.eta, 0.5);
        assert_eq!(c.hidden_dims(), vec![8]);
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = BASE.replace("rounds = 5", "rounds = 5\nround_count = 4");
        assert!(matches!(
            ExperimentConfig::from_toml_str(&text),
            Err(Error::Config(_))
        ));
        let text = BASE.replace("seed = 3", "seed = 3\ncolour = 1");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn rejects_invalid_values() {
        for (from, to) in [
            ("rounds = 5", "rounds = 0"),
            ("num_clients = 3", "num_clients = 1"),
            ("alphas = [1.0, 10.0]", "alphas = [0.0]"),
            ("seeds = [0, 1]", "seeds = []"),
            ("\"fedavg\", \"krum\"", "\"fedavg\", \"fedavg\""),
            ("\"fedavg\", \"krum\"", "\"fedprox\""),
            ("num_clients = 3", "num_clients = 2"),
            ("num_examples = 200", "num_examples = 3"),
        ] {
            let text = BASE.replace(from, to);
            assert!(ExperimentConfig::from_toml_str(&text).is_err(), "{to}");
        }
        let text = format!("halting_round = 9\n{BASE}");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let text = format!("eval_fraction = 1.0\n{BASE}");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn toml_round_trip_and_fingerprint() {
        let c = ExperimentConfig::from_toml_str(BASE).unwrap();
        let again = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.fingerprint(), again.fingerprint());
        let mut other = c.clone();
        other.rounds = 6;
        assert_ne!(c.fingerprint(), other.fingerprint());
        let serial = ExperimentConfig {
            parallel: false,
            ..c.clone()
        };
        assert_eq!(c.fingerprint(), serial.fingerprint());
    }
}
