//! Deterministic federated-learning simulator with per-round Shapley
//! contribution evaluation.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] – a small fully connected classifier, local SGD and evaluation.
//! * [`data`] – synthetic tasks, Dirichlet size splits and IDX ingestion.
//! * [`aggregation`] – the eight server aggregation strategies.
//! * [`shapley`] – exact and Monte Carlo Shapley engines plus the per-round adapter.
//! * [`contribution`] – round weighting, normalisation, ground truth, halting round search.
//! * [`analysis`] – distance metrics, the equal-payout baseline and cross-strategy diffs.
//! * [`runner`] – experiment configuration, the federation loop, sweeps and result emission.

pub mod aggregation;
pub mod analysis;
pub mod contribution;
pub mod data;
mod error;
pub mod model;
pub mod rng;
pub mod runner;
pub mod shapley;

pub use aggregation::{ClientUpdate, Hyper, ServerState, StrategyKind};
pub use analysis::{chebyshev, expected_equal_error, sq_euclid};
pub use contribution::{ContributionVector, GroundTruth, RoundShapleyLog};
pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{EvalResult, ModelSpec, ParamVector, TrainConfig};
pub use shapley::{CharacteristicFn, Coalition, ShapleyVector};
