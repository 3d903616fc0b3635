//! Experiment orchestration: configuration, the federation loop, sweeps
//! over the grid and result emission.

pub mod config;
pub mod emit;
pub mod experiment;
pub mod federation;

pub use config::{ExperimentConfig, HaltingSetting, SubsetMode, TaskConfig};
pub use emit::{emit_results, read_cell_rows, CellRow, Format};
pub use experiment::{run_experiment, CellResult, ExperimentOutput, ResultTable, SummaryRow};
pub use federation::{run_federation, Cell, RunRecord};
