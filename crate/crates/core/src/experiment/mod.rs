//! Class balancing, standardization, training, metrics and spatial
//! cross-validation.

pub mod balance;
pub mod crossval;
pub mod metrics;
pub mod standardize;
pub mod train;

pub use balance::undersample;
pub use crossval::{
    spatial_crossval, write_prediction_pgm, CrossvalOptions, FoldFailure, FoldResult, MeanStd, MetricSummary,
    MetricsReport, ZoneSummary,
};
pub use metrics::{compute_metrics, ConfusionMatrix, Metrics};
pub use standardize::{standardize_features, Standardizer, MIN_STD};
pub use train::{evaluate, leakage, train_model, Evaluation, ModelKind, SplitSpec, TrainConfig, TrainedModel};
