use std::cell::Cell;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{PolicyParams, Prompt};
use crate::oracle::{stability_metric, welch_ttest, TTestResult};
use crate::rng::Rng;
use crate::stats::{mean, sample_std};
use crate::trainers::{evaluate_policy, train, Method, TrainSetup};

use super::config::RunConfig;
use super::logs::{read_logs, rows_from_outcome, write_logs, RunLogRow};
use super::task::{build_task, task_rng, Task};

const TRAIN_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;
const FINAL_VAL_STREAM: u64 = 4;

/// Window of the reward-stability metric.
pub const STABILITY_WINDOW: usize = 50;
/// Fraction of the training curve compared by the pairwise t-tests.
pub const FINAL_FRACTION: f64 = 0.2;

pub const RUNS_FILE: &str = "runs.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Held-out prompts that count how often they are handed out.
pub struct TestPool<'a> {
    prompts: &'a [Prompt],
    reads: Cell<usize>,
}

impl<'a> TestPool<'a> {
    pub fn new(prompts: &'a [Prompt]) -> Self {
        TestPool {
            prompts,
            reads: Cell::new(0),
        }
    }

    pub fn read(&self) -> &'a [Prompt] {
        self.reads.set(self.reads.get() + 1);
        self.prompts
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }
}

/// Outcome of one `(method, seed)` run, without its per-step rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub steps: usize,
    pub skipped_steps: Vec<usize>,
    /// Step of the parameters evaluated on the test pool.
    pub test_checkpoint_step: Option<usize>,
    pub test_reward: Option<f64>,
    pub best_val: Option<f64>,
    pub best_step: Option<usize>,
    /// Mean training reward over the final fifth of the run.
    pub final_train: Option<f64>,
    /// Validation reward of the final parameters.
    pub final_val: Option<f64>,
    pub reward_model_accuracy: Option<f64>,
    pub test_reads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    pub rows: Vec<RunLogRow>,
    pub final_params: Option<PolicyParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub failed: usize,
    pub test_reward_mean: Option<f64>,
    pub test_reward_std: Option<f64>,
    pub best_val_mean: Option<f64>,
    pub final_train_mean: Option<f64>,
    pub final_val_mean: Option<f64>,
    /// `best_val − test`, averaged over runs.
    pub gap_best_val_minus_test: Option<f64>,
    /// `final_train − final_val`, averaged over runs.
    pub gap_final_train_minus_final_val: Option<f64>,
    /// Mean over steps and runs of the per-step gradient variance summary.
    pub grad_var_summary: Option<f64>,
    /// Same, using the square root of each step's variance summary.
    pub grad_std_summary: Option<f64>,
    /// Mean within-window reward variance over sliding 50-step windows.
    pub stability: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairTest {
    pub method_a: Method,
    pub method_b: Method,
    pub test: Option<TTestResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub methods: Vec<MethodSummary>,
    /// Welch t-tests on the final 20% of training rewards, pooled over seeds.
    pub ttests: Vec<PairTest>,
    pub runs: Vec<RunRecord>,
}

pub struct ExperimentOutput {
    pub runs: Vec<RunOutput>,
    pub summary: Summary,
}

fn final_slice(rows: &[RunLogRow]) -> &[RunLogRow] {
    let n = rows.len();
    let k = ((n as f64 * FINAL_FRACTION).ceil() as usize).min(n);
    &rows[n - k..]
}

fn run_one(config: &RunConfig, method: Method, seed: u64, task: &Task) -> Result<RunOutput> {
    let root = Rng::new(seed);
    let trainer = config.trainer_for(method);
    let setup = TrainSetup {
        config: &trainer,
        init: task.init.clone(),
        reward: &task.reward,
        train_prompts: &task.train,
        val_prompts: &task.val,
    };
    let outcome = train(&setup, &root.split(TRAIN_STREAM))?;
    let rows = rows_from_outcome(method, seed, &outcome);

    let (eval_params, checkpoint_step) = match &outcome.best {
        Some(b) => (&b.params, b.step),
        None => (&outcome.params, rows.last().map_or(0, |r| r.step)),
    };
    let test = TestPool::new(&task.test);
    let test_reward = evaluate_policy(
        eval_params,
        &task.reward,
        test.read(),
        trainer.gen_tokens,
        trainer.eval_samples,
        &root.split(TEST_STREAM),
    )?;

    let final_val = match outcome.validation.last() {
        Some(&(step, v)) if step == trainer.max_steps => v,
        _ => evaluate_policy(
            &outcome.params,
            &task.reward,
            &task.val,
            trainer.gen_tokens,
            trainer.eval_samples,
            &root.split(FINAL_VAL_STREAM),
        )?,
    };
    let final_train = (!rows.is_empty()).then(|| mean(&final_slice(&rows).iter().map(|r| r.train_reward).collect::<Vec<_>>()));
    let record = RunRecord {
        method,
        seed,
        status: RunStatus::Ok,
        error: None,
        steps: rows.len(),
        skipped_steps: outcome.skipped.clone(),
        test_checkpoint_step: Some(checkpoint_step),
        test_reward: Some(test_reward),
        best_val: outcome.best.as_ref().map(|b| b.val_reward),
        best_step: outcome.best.as_ref().map(|b| b.step),
        final_train,
        final_val: Some(final_val),
        reward_model_accuracy: task.reward_accuracy,
        test_reads: test.reads(),
    };
    Ok(RunOutput {
        record,
        rows,
        final_params: Some(outcome.params),
    })
}

fn failed(method: Method, seed: u64, e: &Error) -> RunOutput {
    log::error!("{method} seed {seed} failed: {e}");
    RunOutput {
        record: RunRecord {
            method,
            seed,
            status: RunStatus::Failed,
            error: Some(e.to_string()),
            steps: 0,
            skipped_steps: Vec::new(),
            test_checkpoint_step: None,
            test_reward: None,
            best_val: None,
            best_step: None,
            final_train: None,
            final_val: None,
            reward_model_accuracy: None,
            test_reads: 0,
        },
        rows: Vec::new(),
        final_params: None,
    }
}

/// Trains every `(method, seed)` pair, evaluates each on its test pool once,
/// and summarises. Runs execute in parallel; a failing run is recorded and
/// does not stop the others.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let tasks: Vec<Result<Task>> = config
        .seeds
        .par_iter()
        .map(|&seed| build_task(&config.task, config.trainer.gen_tokens, &task_rng(seed)))
        .collect();
    let tasks = tasks.into_iter().collect::<Result<Vec<Task>>>()?;
    let pairs: Vec<(Method, usize)> = config
        .methods
        .iter()
        .flat_map(|&m| (0..config.seeds.len()).map(move |s| (m, s)))
        .collect();
    let runs: Vec<RunOutput> = pairs
        .par_iter()
        .map(|&(method, s)| {
            let seed = config.seeds[s];
            run_one(config, method, seed, &tasks[s]).unwrap_or_else(|e| failed(method, seed, &e))
        })
        .collect();
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let rows: Vec<&[RunLogRow]> = runs.iter().map(|r| r.rows.as_slice()).collect();
    let summary = summarize(&config.methods, &records, &rows);
    Ok(ExperimentOutput { runs, summary })
}

fn opt_mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| mean(xs))
}

/// Aggregates run records and their per-step rows (parallel slices).
pub fn summarize(methods: &[Method], records: &[RunRecord], rows: &[&[RunLogRow]]) -> Summary {
    let mut summaries = Vec::with_capacity(methods.len());
    let mut finals: Vec<Vec<f64>> = Vec::with_capacity(methods.len());
    for &m in methods {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].method == m).collect();
        let ok: Vec<usize> = idx.iter().copied().filter(|&i| records[i].status == RunStatus::Ok).collect();
        let field = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Vec<f64> { ok.iter().filter_map(|&i| f(&records[i])).collect() };
        let tests = field(&|r| r.test_reward);
        let gap_a = field(&|r| Some(r.best_val? - r.test_reward?));
        let gap_b = field(&|r| Some(r.final_train? - r.final_val?));
        let var_runs: Vec<f64> = ok
            .iter()
            .filter(|&&i| !rows[i].is_empty())
            .map(|&i| mean(&rows[i].iter().map(|r| r.grad_var).collect::<Vec<_>>()))
            .collect();
        let std_runs: Vec<f64> = ok
            .iter()
            .filter(|&&i| !rows[i].is_empty())
            .map(|&i| mean(&rows[i].iter().map(|r| r.grad_var.sqrt()).collect::<Vec<_>>()))
            .collect();
        let stab: Vec<f64> = ok
            .iter()
            .filter(|&&i| !rows[i].is_empty())
            .filter_map(|&i| {
                let series: Vec<f64> = rows[i].iter().map(|r| r.train_reward).collect();
                stability_metric(&series, STABILITY_WINDOW.min(series.len())).ok()
            })
            .collect();
        finals.push(
            ok.iter()
                .flat_map(|&i| final_slice(rows[i]).iter().map(|r| r.train_reward))
                .collect(),
        );
        summaries.push(MethodSummary {
            method: m,
            runs: idx.len(),
            failed: idx.len() - ok.len(),
            test_reward_mean: opt_mean(&tests),
            test_reward_std: (tests.len() >= 2).then(|| sample_std(&tests)),
            best_val_mean: opt_mean(&field(&|r| r.best_val)),
            final_train_mean: opt_mean(&field(&|r| r.final_train)),
            final_val_mean: opt_mean(&field(&|r| r.final_val)),
            gap_best_val_minus_test: opt_mean(&gap_a),
            gap_final_train_minus_final_val: opt_mean(&gap_b),
            grad_var_summary: opt_mean(&var_runs),
            grad_std_summary: opt_mean(&std_runs),
            stability: opt_mean(&stab),
        });
    }
    let mut ttests = Vec::new();
    for a in 0..methods.len() {
        for b in a + 1..methods.len() {
            let (test, error) = match welch_ttest(&finals[a], &finals[b]) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            ttests.push(PairTest {
                method_a: methods[a],
                method_b: methods[b],
                test,
                error,
            });
        }
    }
    Summary {
        methods: summaries,
        ttests,
        runs: records.to_vec(),
    }
}

pub fn log_file_name(method: Method, seed: u64) -> String {
    format!("{}_seed{seed}.csv", method.name())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one CSV per run, the run records and the summary into `dir`.
pub fn write_experiment(out: &ExperimentOutput, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for run in &out.runs {
        let path = dir.join(log_file_name(run.record.method, run.record.seed));
        write_logs(&run.rows, &path)?;
        written.push(path);
    }
    let records: Vec<&RunRecord> = out.runs.iter().map(|r| &r.record).collect();
    let runs_path = dir.join(RUNS_FILE);
    write_json(&records, &runs_path)?;
    written.push(runs_path);
    let summary_path = dir.join(SUMMARY_FILE);
    write_json(&out.summary, &summary_path)?;
    written.push(summary_path);
    Ok(written)
}

/// Reloads run records and their CSV logs from an experiment directory.
pub fn load_experiment(dir: &Path) -> Result<(Vec<RunRecord>, Vec<Vec<RunLogRow>>)> {
    let path = dir.join(RUNS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<RunRecord> = serde_json::from_str(&text)?;
    let rows = records
        .iter()
        .map(|r| read_logs(&dir.join(log_file_name(r.method, r.seed))))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, rows))
}

/// Recomputes `summary.json` from a directory written by [`write_experiment`].
pub fn resummarize(dir: &Path) -> Result<(Summary, Vec<Vec<RunLogRow>>)> {
    let (records, rows) = load_experiment(dir)?;
    let mut methods: Vec<Method> = Vec::new();
    for r in &records {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let slices: Vec<&[RunLogRow]> = rows.iter().map(Vec::as_slice).collect();
    let summary = summarize(&methods, &records, &slices);
    write_json(&summary, &dir.join(SUMMARY_FILE))?;
    Ok((summary, rows))
}
