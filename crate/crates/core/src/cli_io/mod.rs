//! Point files, dataset manifests, run configuration and stage orchestration.

mod experiment;
mod format;
mod manifest;

pub use experiment::{
    emit_plot_data, evaluate_params, load_splits, predict_all, run_experiment, DataConfig, EvalConfig, ExperimentConfig,
    ParamSource, RunPaths, Splits, Stage, PLOT_HEADER,
};
pub use format::{load_cloud, load_field, read_triples, save_cloud, save_field, write_triples};
pub use manifest::{write_dataset, CaseEntry, DatasetManifest, MANIFEST_FILE};
