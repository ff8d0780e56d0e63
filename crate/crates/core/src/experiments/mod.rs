//! Config-driven training, evaluation sweeps, ablations and export.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod export;
pub mod train;

pub use config::{CeTrainConfig, ExperimentConfig, TrainConfig};
pub use data::{load_splits, CeModel, PreparedSample, Splits};
pub use evaluate::{ablation_on, ablation_suite, evaluate_point, evaluate_sweep, sort_rows, with_seed, ResultRow};
pub use export::{read_results_csv, render_svg, write_log_csv, write_results_csv, write_svg};
pub use train::{evaluate_ce, load_checkpoint, save_checkpoint, train, train_ce, CeKind, EpochRow, TrainedModel};
