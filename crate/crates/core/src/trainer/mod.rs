//! Training loop, cross validation, ablation variants, inference and the
//! overfit sanity check.
//!
//! Run artifacts for a cross-validation directory:
//!
//! ```text
//! <out>/fold<f>/history.jsonl      one EpochRecord per line, appended
//! <out>/fold<f>/best.safetensors   highest validation DSC
//! <out>/fold<f>/final.safetensors  last epoch, with optimizer state
//! <out>/report.jsonl, report.txt
//! ```

mod ablation;
mod config;
mod predict;
mod smoke;
mod train;

pub use ablation::{config_diff, run_ablation, AblationReport, AblationVariant, TOGGLE_FIELDS};
pub use config::TrainConfig;
pub use predict::{Prediction, Predictor};
pub use smoke::{overfit_samples, overfit_smoke_test, OverfitConfig, OverfitReport, OverfitRun};
pub use train::{
    cross_validate, evaluate, mean_dsc, train_fold, train_step, write_report, Batch,
    CrossValidation, EpochRecord, FoldOutcome, Snapshot, StepLoss, TrainHistory,
};
