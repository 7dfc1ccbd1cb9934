//! Run configuration, synthetic tasks, experiment orchestration, logs,
//! plots and the command-line interface.

pub mod cli;
mod config;
mod experiment;
mod logs;
mod plots;
mod task;

pub use config::{
    default_weights, load_config, parse_config, RewardKind, RewardSpec, RunConfig, TaskSpec, OUT_DIR_ENV,
};
pub use experiment::{
    load_experiment, log_file_name, resummarize, run_experiment, summarize, write_experiment, ExperimentOutput,
    MethodSummary, PairTest, RunOutput, RunRecord, RunStatus, Summary, TestPool, FINAL_FRACTION, RUNS_FILE,
    STABILITY_WINDOW, SUMMARY_FILE,
};
pub use logs::{read_logs, render_float, rows_from_outcome, write_logs, RunLogRow, LOG_HEADER};
pub use plots::{emit_plots, svg_document, Chart, PlotReport, Series};
pub use task::{build_task, draw_prompts, init_policy, labeled_sequences, oracle_instance, task_rng, Task};
