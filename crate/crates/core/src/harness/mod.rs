//! Training, evaluation, checkpointing and ablation of the full matching
//! model on synthetic scenes.

mod ablate;
mod checkpoint;
mod config;
mod eval;
mod model;
mod params;
mod report;
mod train;

pub use ablate::{ablate, grid_settings, AblationCell, AblationReport, AblationRow, Panel};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AblationGrid, EvalConfig, ExperimentConfig, ModuleFlags, TrainConfig};
pub use eval::{
    correspondences, evaluate, evaluate_scene, inlier_ratio, is_inlier, register, scene_matches, scene_metrics, write_csv,
    Evaluation, MetricMeans, SceneMetrics, CSV_HEADER,
};
pub use model::{check_grid, classifier, domain_features, forward, predict, prepare, sample_eps, scene_losses, total_entropy, Forward, PreparedScene, GRID_MULTIPLE};
pub use params::{init_params, Adam, BoundParams, ParamStore, INIT_VARIANCE};
pub use report::{
    patch_classes, patch_variances, uncertainty_separation, welch_greater, ClassStats, MetricsReport, PatchClass, Separation, CORRUPTED_FRACTION,
};
pub use train::{resolve_gamma, train, validate, StepLog, TrainReport, TrainRun, ValPoint};
