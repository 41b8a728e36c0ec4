//! Error metrics, reference baselines and interpretability exports.

pub mod baselines;
pub mod interpret;
pub mod metrics;

pub use baselines::{baseline_metrics, lstm_baseline_config, persistence_predict, BaselineMetrics, HistoricalAverage};
pub use interpret::{export_attention, export_feature_importance, ContributionMatrix, FeatureImportance, MembershipMatrix};
pub use metrics::{mae, rmse, ErrorPair, MetricsReport};
