//! Training, cross-validation, the dimension sweep and reporting.

mod config;
mod crossval;
pub mod gradcheck;
mod report;
mod train;

pub use config::RunConfig;
pub use crossval::{
    crossval, crossval_prepared, embedding_for, evaluate, fit, fold_plan, run_grid, sweep, sweep_cells, sweep_vectors, train_config, Cell,
    Prepared,
};
pub use report::{sidecar, FoldResult, ReportRow, RunReport, REPORT_COLUMNS};
pub use train::{derive_seed, format_scored, predict, score_lines, train, train_with, write_log, EpochLog, Scored, TrainConfig};
