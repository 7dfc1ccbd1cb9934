use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::models::{
    generate, reward_analytic, AnalyticReward, GenerateOptions, Mode, PolicyParams, Prompt, RewardModel, TokenSource,
};
use crate::rng::Rng;
use crate::stats::{mean, RunningMoments};
use crate::trainers::step_log_probs;

use super::enumerate::{enumerate_exact, EnumerationResult};

/// Samples per parallel work unit. Fixed so the merge order, and hence every
/// reported number, does not depend on the thread count.
const CHUNK: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Score function `r(y)·∇log π(y)` on sampled discrete sequences.
    Reinforce,
    /// Pathwise gradient through relaxed Gumbel-Softmax tokens.
    Gs,
    /// Pathwise gradient through straight-through tokens.
    GsSte,
}

impl Estimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reinforce" => Ok(Estimator::Reinforce),
            "gs" => Ok(Estimator::Gs),
            "gs_ste" => Ok(Estimator::GsSte),
            _ => Err(Error::invalid(format!("unknown estimator {s:?}; expected reinforce, gs or gs_ste"))),
        }
    }
}

/// The tiny instance every estimator is evaluated on.
#[derive(Clone, Copy)]
pub struct EstimatorProblem<'a> {
    pub params: &'a PolicyParams,
    pub prompt: &'a Prompt,
    pub steps: usize,
    pub reward: &'a AnalyticReward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub method: Estimator,
    pub n_samples: usize,
    /// Relaxation temperature; absent for REINFORCE.
    pub tau: Option<f64>,
    /// Estimated gradient of the expected reward, flattened.
    pub mean: Vec<f64>,
    /// Per-component sample variance of single-sample estimates.
    pub variance: Vec<f64>,
    /// Mean of the per-component variances.
    pub variance_summary: f64,
    /// Mean of the per-component standard deviations.
    pub std_summary: f64,
    /// `‖mean − exact‖₂` against the exact discrete gradient.
    pub bias_l2: f64,
    /// `sqrt(Σ variance / n)`: the bias norm expected from sampling noise alone.
    pub bias_noise_floor: f64,
    /// Mean sampled reward (on relaxed tokens for GS).
    pub mean_reward: f64,
}

impl EstimatorReport {
    /// Standard error of each component of `mean`.
    pub fn standard_errors(&self) -> Vec<f64> {
        self.variance.iter().map(|v| (v / self.n_samples as f64).sqrt()).collect()
    }
}

fn single_estimate(method: Estimator, problem: &EstimatorProblem<'_>, tau: f64, rng: &mut Rng) -> Result<(Vec<f64>, f64)> {
    let mut g = Graph::new();
    let pv = problem.params.bind(&mut g, true);
    let opts = GenerateOptions {
        steps: problem.steps,
        tau,
        mode: match method {
            Estimator::Reinforce => Mode::Hard,
            Estimator::Gs => Mode::Gs,
            Estimator::GsSte => Mode::Ste,
        },
        top_k: None,
    };
    // The estimators never touch the KL terms, so the policy serves as its own reference.
    let seq = generate(&mut g, &pv, &pv, problem.prompt, &opts, TokenSource::Sample(rng))?;
    let (out, reward) = match method {
        Estimator::Reinforce => {
            let r = problem.reward.score_ids(&seq.ids);
            let lps = step_log_probs(&mut g, &seq)?;
            let lp = g.add_all(&lps)?;
            (g.scale(lp, r), r)
        }
        Estimator::Gs | Estimator::GsSte => {
            let r = reward_analytic(&mut g, &problem.reward.weights, &seq.tokens)?;
            (r, g.value(r).item())
        }
    };
    let grads = g.backward(out)?;
    Ok((pv.gradients(&grads).flatten(), reward))
}

fn collect(method: Estimator, problem: &EstimatorProblem<'_>, tau: f64, n: usize, rng: &Rng) -> Result<(RunningMoments, f64)> {
    let dim = problem.params.num_params();
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let parts: Vec<Result<(RunningMoments, f64)>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut m = RunningMoments::new(dim);
            let mut reward = 0.0;
            for i in lo..hi {
                let mut srng = rng.split(i as u64);
                let (grad, r) = single_estimate(method, problem, tau, &mut srng)?;
                m.push(&grad);
                reward += r;
            }
            Ok((m, reward))
        })
        .collect();
    let mut all = RunningMoments::new(dim);
    let mut reward = 0.0;
    for part in parts {
        let (m, r) = part?;
        all.merge(&m);
        reward += r;
    }
    Ok((all, reward / n as f64))
}

fn report(method: Estimator, tau: Option<f64>, moments: RunningMoments, mean_reward: f64, exact: &EnumerationResult) -> EstimatorReport {
    let n = moments.count;
    let variance = moments.variance();
    let truth = exact.gradient.flatten();
    let bias_l2 = moments
        .mean
        .iter()
        .zip(&truth)
        .map(|(m, t)| (m - t) * (m - t))
        .sum::<f64>()
        .sqrt();
    EstimatorReport {
        method,
        n_samples: n,
        tau,
        variance_summary: mean(&variance),
        std_summary: mean(&variance.iter().map(|v| v.sqrt()).collect::<Vec<_>>()),
        bias_noise_floor: (variance.iter().sum::<f64>() / n as f64).sqrt(),
        bias_l2,
        mean: moments.mean,
        variance,
        mean_reward,
    }
}

fn check_inputs(n_samples: usize, tau: f64) -> Result<()> {
    if n_samples < 2 {
        return Err(Error::invalid(format!("n_samples must be >= 2, got {n_samples}")));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// Draws `n_samples` independent single-sample gradient estimates (sample `i`
/// uses stream `rng.split(i)`) and compares their mean with the exact gradient.
pub fn estimator_stats(
    method: Estimator,
    problem: &EstimatorProblem<'_>,
    tau: f64,
    n_samples: usize,
    rng: &Rng,
) -> Result<EstimatorReport> {
    check_inputs(n_samples, tau)?;
    let exact = enumerate_exact(problem.params, problem.prompt, problem.steps, problem.reward)?;
    let (moments, r) = collect(method, problem, tau, n_samples, rng)?;
    let tau = (method != Estimator::Reinforce).then_some(tau);
    Ok(report(method, tau, moments, r, &exact))
}

/// GS pathwise reports over a descending list of temperatures. Every
/// temperature reuses the same noise streams.
pub fn bias_variance_sweep(
    problem: &EstimatorProblem<'_>,
    taus: &[f64],
    n_samples: usize,
    rng: &Rng,
) -> Result<Vec<EstimatorReport>> {
    if taus.is_empty() {
        return Err(Error::invalid("sweep needs at least one temperature"));
    }
    if taus.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid(format!("temperatures must be strictly descending, got {taus:?}")));
    }
    for &tau in taus {
        check_inputs(n_samples, tau)?;
    }
    let exact = enumerate_exact(problem.params, problem.prompt, problem.steps, problem.reward)?;
    taus.iter()
        .map(|&tau| {
            let (moments, r) = collect(Estimator::Gs, problem, tau, n_samples, rng)?;
            Ok(report(Estimator::Gs, Some(tau), moments, r, &exact))
        })
        .collect()
}

/// Mean reward of HARD rollouts across prompts and its standard error.
pub fn monte_carlo_reward(
    params: &PolicyParams,
    prompts: &[Prompt],
    reward: &RewardModel,
    steps: usize,
    samples_per_prompt: usize,
    rng: &Rng,
) -> Result<(f64, f64)> {
    if prompts.is_empty() || samples_per_prompt < 2 {
        return Err(Error::invalid("Monte Carlo reward needs prompts and at least two samples per prompt"));
    }
    let opts = GenerateOptions {
        steps,
        tau: 1.0,
        mode: Mode::Hard,
        top_k: None,
    };
    let parts: Vec<Result<RunningMoments>> = prompts
        .par_iter()
        .enumerate()
        .map(|(p, prompt)| {
            let prng = rng.split(p as u64);
            let mut m = RunningMoments::new(1);
            for s in 0..samples_per_prompt {
                let mut g = Graph::new();
                let pv = params.bind(&mut g, false);
                let mut srng = prng.split(s as u64);
                let seq = generate(&mut g, &pv, &pv, prompt, &opts, TokenSource::Sample(&mut srng))?;
                m.push(&[reward.score_ids(prompt, &seq.ids)]);
            }
            Ok(m)
        })
        .collect();
    let mut all = RunningMoments::new(1);
    for part in parts {
        all.merge(&part?);
    }
    let se = (all.variance()[0] / all.count as f64).sqrt();
    Ok((all.mean[0], se))
}
