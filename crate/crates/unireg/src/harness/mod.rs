//! Experiment harness: typed key=value configs, metric tables, run
//! manifests, the experiment runners themselves, and text exports.

pub mod config;
pub mod export;
pub mod manifest;
pub mod metrics;
pub mod run;

pub use config::{Config, Experiment};
pub use export::{
    collect_run_dirs, diagnose_dump, export_plot_data, read_embedding_dump,
    write_embedding_dump, DiagnoseReport,
};
pub use manifest::{load_manifest, save_manifest, RunManifest};
pub use metrics::{MetricsRow, MetricsTable, METRIC_COLUMNS};
pub use run::{run, run_id, sweep};
