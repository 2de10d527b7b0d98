//! Training runs, sweeps, the attribute scan, the ablation table and their
//! on-disk outputs.

pub mod config;
pub mod experiments;
pub mod output;
pub mod train;

pub use config::{DataSource, Method, RunConfig};
pub use experiments::{
    ablation_configs, ablation_matrix, bias_scan, run_all, select, selection_rule, sweep, sweep_on,
    AblationRow, ScanEntry, SweepPoint, SweepResult, DEFAULT_BA_TOLERANCE, DEFAULT_GRID,
};
pub use train::{predict, prepare_data, train, train_on, BatchLog, EpochLog, Prepared, RunRecord};

/// Environment variable naming the root directory for run outputs.
pub const OUT_ENV: &str = "FAIRVIT_OUT";
