//! Dataset assembly, geographic splits, training with best-validation
//! checkpointing, leave-one-region-out cross-validation and ensembles.

mod cv;
mod dataset;
mod ensemble;
mod plan;
mod split;
mod train;

pub use cv::{
    cross_validate, pooled_split, read_summary_csv, train_no_holdout, CvOutcome, CvReport, CvRun,
    HoldoutSummary, MEAN_ROW, NA,
};
pub use dataset::{extract_samples, group_by_region, InputSet, RegionDataset, Sample};
pub use ensemble::{
    ensemble_predict, evaluate_region, mean_over_members, read_ensemble_csv, write_ensemble_csv, Ensemble,
    EnsembleRegionRow,
};
pub use plan::TrainPlan;
pub use split::{geographic_split, Split, SPLIT_TOLERANCE};
pub use train::{
    average_curves, best_epoch, evaluate_rmse_db, predict_db, read_curve_csv, train_model, write_curve_csv, BatchObserver,
    EpochRecord, Phase, TrainOutcome,
};
