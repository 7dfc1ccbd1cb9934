//! The `gradelab` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::oracle::{bias_variance_sweep, enumerate_exact, estimator_stats, Estimator, EstimatorProblem, EstimatorReport};

use super::config::{load_config, RunConfig};
use super::experiment::{resummarize, run_experiment, write_experiment, Summary};
use super::logs::RunLogRow;
use super::plots::emit_plots;
use super::task::{oracle_instance, task_rng};

/// Like `println!`, but a closed stdout (say, piped into `head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

/// File the `sweep` command writes into the output directory.
pub const SWEEP_FILE: &str = "sweep.json";

#[derive(Debug, Parser)]
#[command(name = "gradelab", version, about = "Gumbel-Softmax alignment experiments on tiny policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured method and seed, then write logs, summary and plots.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Gumbel-Softmax bias and variance over a list of temperatures.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Strictly descending, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        taus: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Statistics of one gradient estimator against the exact gradient.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_estimator)]
        method: Estimator,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Exact expected reward and gradient by enumeration.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute the summary and plots of a finished experiment directory.
    Report {
        #[arg(long)]
        logs: PathBuf,
    },
}

fn parse_estimator(s: &str) -> std::result::Result<Estimator, String> {
    Estimator::parse(s).map_err(|e| e.to_string())
}

/// Exit code for an error: 2 for bad configuration or arguments, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::TooLarge { .. } => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn first_seed(config: &RunConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(config.seeds[0])
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    out!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_sweep(dir: &Path) -> Result<Option<Vec<EstimatorReport>>> {
    let path = dir.join(SWEEP_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

fn plots(rows: &[RunLogRow], dir: &Path) -> Result<()> {
    let sweep = read_sweep(dir)?;
    let report = emit_plots(rows, sweep.as_deref(), dir)?;
    for s in &report.skipped {
        log::info!("plot skipped: {s}");
    }
    Ok(())
}

fn print_summary(summary: &Summary) {
    out!("{:<12} {:>5} {:>7} {:>12} {:>12} {:>12}", "method", "runs", "failed", "test_reward", "final_train", "final_val");
    let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
    for m in &summary.methods {
        out!(
            "{:<12} {:>5} {:>7} {:>12} {:>12} {:>12}",
            m.method.name(),
            m.runs,
            m.failed,
            cell(m.test_reward_mean),
            cell(m.final_train_mean),
            cell(m.final_val_mean)
        );
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { config, seed } => {
            let mut config = load_config(&config)?;
            if let Some(s) = seed {
                config.seeds = vec![s];
            }
            let out = run_experiment(&config)?;
            let dir = config.resolved_output_dir();
            write_experiment(&out, &dir)?;
            let rows: Vec<RunLogRow> = out.runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
            plots(&rows, &dir)?;
            print_summary(&out.summary);
            out!("results written to {}", dir.display());
            let failed = out.summary.methods.iter().map(|m| m.failed).sum::<usize>();
            if failed > 0 {
                eprintln!("warning: {failed} run(s) failed; see {}", dir.join(super::experiment::RUNS_FILE).display());
            }
            Ok(())
        }
        Command::Sweep { config, taus, samples, seed } => {
            let config = load_config(&config)?;
            let root = task_rng(first_seed(&config, seed));
            let (params, prompt, reward) = oracle_instance(&config.task, &root)?;
            let problem = EstimatorProblem {
                params: &params,
                prompt: &prompt,
                steps: config.trainer.gen_tokens,
                reward: &reward,
            };
            let reports = bias_variance_sweep(&problem, &taus, samples, &root.split(SWEEP_STREAM))?;
            let dir = config.resolved_output_dir();
            write_json(&reports, &dir.join(SWEEP_FILE))?;
            let report = emit_plots(&[], Some(&reports), &dir)?;
            for p in &report.written {
                log::info!("wrote {}", p.display());
            }
            print_json(&reports)
        }
        Command::Estimate { config, method, samples, tau, seed } => {
            let config = load_config(&config)?;
            let root = task_rng(first_seed(&config, seed));
            let (params, prompt, reward) = oracle_instance(&config.task, &root)?;
            let problem = EstimatorProblem {
                params: &params,
                prompt: &prompt,
                steps: config.trainer.gen_tokens,
                reward: &reward,
            };
            let report = estimator_stats(method, &problem, tau, samples, &root.split(SWEEP_STREAM))?;
            print_json(&report)
        }
        Command::Oracle { config, seed } => {
            let config = load_config(&config)?;
            let root = task_rng(first_seed(&config, seed));
            let (params, prompt, reward) = oracle_instance(&config.task, &root)?;
            let exact = enumerate_exact(&params, &prompt, config.trainer.gen_tokens, &reward)?;
            out!("E[r]={}", exact.expected_reward);
            out!("{}", exact.to_json());
            Ok(())
        }
        Command::Report { logs } => {
            let (summary, rows) = resummarize(&logs)?;
            let rows: Vec<RunLogRow> = rows.into_iter().flatten().collect();
            plots(&rows, &logs)?;
            print_summary(&summary);
            Ok(())
        }
    }
}

/// Stream for estimator noise, separate from the task's own streams.
const SWEEP_STREAM: u64 = 9;
