//! Configuration, checkpoints and the experiment commands behind the CLI.
//!
//! Every command writes its tables as CSV into a run directory named
//! `<digest>-s<seed>` under the chosen output directory, so concurrent
//! invocations on different configs or seeds never share files.

mod checkpoint;
mod commands;
mod config;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use commands::{
    bench_state, cmd_ablate_depth, cmd_bench, cmd_eval, cmd_gen_data, cmd_lemma_lab, cmd_sweep_h, cmd_train, run_dir, write_table,
    AblationRow, BenchOptions, BenchReport, Experiment, TrainOutcome, CHECKPOINT_FILE, HISTORY_FILE,
};
pub use config::{AblateConfig, ConfigError, DatasetConfig, DatasetKind, ExperimentConfig, MetricsConfig};

#[cfg(test)]
mod tests;
