//! Experiment orchestration: configuration, datasets, checkpoints and the
//! train / prune / eval / bench commands.

pub mod bench;
pub mod checkpoint;
pub mod cifar;
pub mod config;
pub mod pipeline;
pub mod state;
pub mod synthetic;

pub use bench::{bench_model, BenchReport, CompactModel, Timing};
pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, REFERENCE_ARCHITECTURE};
pub use pipeline::{cmd_bench, cmd_eval, cmd_prune, cmd_train, load_data, Data, Method, PruneOptions, PruneSummary};
pub use synthetic::{synthetic_dataset, SyntheticSpec};
