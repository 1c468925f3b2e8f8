//! Experiment configuration, orchestration and metric files.

mod config;
mod experiment;
mod output;
mod sweep;

pub use config::{
    parse_scalar, set_path, AttackConfig, AttackKind, CoaeSettings, DatasetConfig, DatasetKind, ExperimentConfig,
    ModelConfig, TrainConfig, TriggerConfig,
};
pub use experiment::{
    cached_coae, derive_seed, prepare, run_experiment, run_repeats, InferenceSummary, Prepared, RunOutcome, Stream,
};
pub use output::{append_metrics, read_metrics, write_json, write_pd_matrix, MetricsRow, SCHEMA_VERSION};
pub use sweep::{emit_pd_matrix, grid_points, run_sweep, write_summary, Grid, Stat, SweepPoint};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{context}: {source}")]
    Stage {
        context: String,
        #[source]
        source: Box<crate::Error>,
    },
    #[error("io: {0}")]
    Io(String),
}
