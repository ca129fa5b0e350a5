//! Data generation, optimization, training loops and metric output.

pub mod data;
pub mod metrics;
pub mod optim;
pub mod train;

pub use data::{generate_dataset, Dataset, GeneratorKind, Split, SyntheticDatasetSpec};
pub use metrics::{read_metrics, write_metrics};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use train::{
    evaluate, topk_accuracy, train, train_step, Accuracy, EpochRecord, MetricsLog, StepRecord,
    TrainOptions,
};
