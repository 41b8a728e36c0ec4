//! Objective, optimization loop and hyperparameter search.

pub mod grid;
pub mod loss;
pub mod trainer;

pub use grid::{grid_search, ConfigSpace, GridReport, GridRun, KSweepRow};
pub use loss::{group_lasso, group_lasso_matrix, mse_loss, ortho_loss, total_loss, LossBreakdown, LossWeights};
pub use trainer::{evaluate, predict_samples, train, EpochRecord, StopReason, TrainConfig, TrainOutcome, TrainReport};
