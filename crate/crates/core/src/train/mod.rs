//! Optimization, the training loop, evaluation, checkpoints and reports.

mod adam;
mod checkpoint;
mod config;
mod dataset;
mod evaluate;
mod report;
mod trainer;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Precision, TrainConfig};
pub use dataset::{Dataset, PatientData};
pub use evaluate::{evaluate, predict, EvalOptions, FoldMetrics, GroupRecord};
pub use report::{folds_csv, km_svg, mean, population_std, summarize, write_report, RunSummary};
pub use trainer::{patient_gradient, patient_rng, train, EpochLog, TrainOutcome};
