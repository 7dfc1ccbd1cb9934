//! GRADE, GRADE-STE, REINFORCE and PPO over one KL-regularized objective.

mod config;
mod ppo;
mod train;

pub use config::{Method, PpoConfig, ReinforceConfig, TauConfig, TrainerConfig};
pub use ppo::{clipped_surrogate, gae_advantages, ppo_step};
pub use train::{evaluate_policy, train, Checkpoint, TrainOutcome, TrainSetup};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{generate, GenerateOptions, Mode, PolicyParams, Prompt, RewardModel, SoftSequence, TokenSource};
use crate::optim::{clip_global_norm, Adam};
use crate::rng::Rng;
use crate::stats::RunningMoments;

/// `−mean_reward + β·mean_kl`
pub fn objective(mean_reward: f64, mean_kl: f64, beta: f64) -> f64 {
    -mean_reward + beta * mean_kl
}

/// Graph form of [`objective`].
pub fn objective_var(g: &mut Graph, reward: Var, kl: Var, beta: f64) -> Result<Var> {
    let kl = g.scale(kl, beta);
    g.sub(kl, reward)
}

/// `−(r − b)·log π(y)`; the reward and baseline enter as plain numbers.
pub fn reinforce_surrogate(g: &mut Graph, log_prob: Var, reward: f64, baseline: f64) -> Var {
    g.scale(log_prob, -(reward - baseline))
}

/// Per-step `log π(y_t | ·)` of the sequence's chosen ids.
pub fn step_log_probs(g: &mut Graph, seq: &SoftSequence) -> Result<Vec<Var>> {
    seq.policy_logits
        .iter()
        .zip(&seq.ids)
        .map(|(&l, &id)| {
            let ls = g.log_softmax(l)?;
            g.select(ls, id)
        })
        .collect()
}

/// Everything a step reads besides the parameters it updates.
#[derive(Clone, Copy)]
pub struct StepContext<'a> {
    pub reference: &'a PolicyParams,
    pub reward: &'a RewardModel,
    pub prompts: &'a [Prompt],
    pub config: &'a TrainerConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub adam: Adam,
    /// EMA reward baseline used by REINFORCE.
    pub baseline: f64,
}

impl OptimizerState {
    pub fn new(params: &PolicyParams) -> Self {
        OptimizerState {
            adam: Adam::new(params.tensors().iter().map(|t| t.shape().to_vec()).collect()),
            baseline: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// 1-based optimizer step.
    pub step: usize,
    pub mean_reward: f64,
    /// Mean over samples of the summed per-step KL.
    pub mean_kl: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Mean per-component variance of the single-sample gradients.
    pub grad_var: f64,
    /// The accumulated gradient, flattened, before clipping.
    pub grad_sample: Vec<f64>,
    pub tau: f64,
    /// Forward tokens that were exactly one-hot, out of `total_tokens`.
    pub discrete_tokens: usize,
    pub total_tokens: usize,
    /// PPO only: largest `|ρ − 1|` seen in the first inner epoch.
    pub first_epoch_ratio_deviation: Option<f64>,
}

/// One sample's contribution to a step.
pub(crate) struct SampleOutcome {
    pub loss: f64,
    pub reward: f64,
    pub kl: f64,
    pub grads: PolicyParams,
    pub discrete: usize,
    pub total: usize,
    pub ratio_deviation: f64,
}

pub(crate) struct BatchOutcome {
    pub grads: PolicyParams,
    pub loss: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub grad_var: f64,
    pub discrete: usize,
    pub total: usize,
    pub ratio_deviation: f64,
}

/// Averages sample gradients within each micro-batch, then across
/// micro-batches. Sample `i` always lands in micro-batch `i / batch_size`.
pub(crate) fn accumulate(
    params: &PolicyParams,
    config: &TrainerConfig,
    step: usize,
    mut sample: impl FnMut(usize) -> Result<SampleOutcome>,
) -> Result<BatchOutcome> {
    let (b, accum) = (config.batch_size, config.grad_accum);
    let n = (b * accum) as f64;
    let mut grads = PolicyParams::zeros(params.dims());
    let mut moments = RunningMoments::new(params.num_params());
    let mut out = BatchOutcome {
        grads: PolicyParams::zeros(params.dims()),
        loss: 0.0,
        mean_reward: 0.0,
        mean_kl: 0.0,
        grad_var: 0.0,
        discrete: 0,
        total: 0,
        ratio_deviation: 0.0,
    };
    for m in 0..accum {
        let mut micro = PolicyParams::zeros(params.dims());
        for j in 0..b {
            let s = sample(m * b + j)?;
            if !s.loss.is_finite() || !s.grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: format!("sample {} produced loss {} or a non-finite gradient", m * b + j, s.loss),
                });
            }
            moments.push(&s.grads.flatten());
            micro.add_scaled(&s.grads, 1.0);
            out.loss += s.loss / n;
            out.mean_reward += s.reward / n;
            out.mean_kl += s.kl / n;
            out.discrete += s.discrete;
            out.total += s.total;
            out.ratio_deviation = out.ratio_deviation.max(s.ratio_deviation);
        }
        grads.add_scaled(&micro, 1.0 / b as f64);
    }
    grads.scale(1.0 / accum as f64);
    out.grads = grads;
    out.grad_var = moments.mean_variance();
    Ok(out)
}

/// Global-norm clipping followed by one Adam step. Returns the pre-clip norm.
pub fn optimizer_update(params: &mut PolicyParams, grads: &mut PolicyParams, adam: &mut Adam, lr: f64, clip: f64) -> f64 {
    let norm = clip_global_norm(&mut grads.tensors_mut(), clip);
    adam.update(&mut params.tensors_mut(), &grads.tensors(), lr);
    norm
}

/// Prompt choices and per-sample noise streams for one step.
pub(crate) struct StepStreams {
    pub prompts: Vec<usize>,
    noise: Rng,
}

impl StepStreams {
    pub fn new(rng: &Rng, step: usize, pool: usize, n: usize) -> Result<Self> {
        if pool == 0 {
            return Err(Error::invalid("training prompt pool is empty"));
        }
        let base = rng.split(step as u64);
        let mut pick = base.split(0);
        let prompts = (0..n).map(|_| pick.below(pool)).collect();
        Ok(StepStreams {
            prompts,
            noise: base.split(1),
        })
    }

    pub fn sample_rng(&self, i: usize) -> Rng {
        self.noise.split(i as u64)
    }
}

fn is_one_hot(v: &[f64]) -> bool {
    v.iter().filter(|&&x| x == 1.0).count() == 1 && v.iter().all(|&x| x == 0.0 || x == 1.0)
}

pub(crate) fn count_discrete(g: &Graph, seq: &SoftSequence) -> usize {
    seq.tokens.iter().filter(|&&t| is_one_hot(g.value(t).data())).count()
}

fn check_finite_step(params: &PolicyParams, step: usize) -> Result<()> {
    if params.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: "update produced non-finite parameters".into(),
        })
    }
}

/// Applies the update and builds the report. Parameters are left untouched
/// if the update would make them non-finite.
pub(crate) fn finish_step(
    params: &mut PolicyParams,
    opt: &mut OptimizerState,
    config: &TrainerConfig,
    step: usize,
    tau: f64,
    mut batch: BatchOutcome,
    ratio: Option<f64>,
) -> Result<StepReport> {
    let grad_sample = batch.grads.flatten();
    let mut next = params.clone();
    let mut adam = opt.adam.clone();
    let grad_norm = optimizer_update(&mut next, &mut batch.grads, &mut adam, config.learning_rate, config.grad_clip);
    check_finite_step(&next, step)?;
    *params = next;
    opt.adam = adam;
    Ok(StepReport {
        step,
        mean_reward: batch.mean_reward,
        mean_kl: batch.mean_kl,
        loss: batch.loss,
        grad_norm,
        grad_var: batch.grad_var,
        grad_sample,
        tau,
        discrete_tokens: batch.discrete,
        total_tokens: batch.total,
        first_epoch_ratio_deviation: ratio,
    })
}

pub(crate) fn step_tau(config: &TrainerConfig, step: usize) -> Result<f64> {
    Ok(config.tau.schedule()?.temperature(step.saturating_sub(1)))
}

fn pathwise_step(
    mode: Mode,
    params: &mut PolicyParams,
    ctx: &StepContext<'_>,
    opt: &mut OptimizerState,
    rng: &Rng,
    step: usize,
) -> Result<StepReport> {
    let cfg = ctx.config;
    let tau = step_tau(cfg, step)?;
    let streams = StepStreams::new(rng, step, ctx.prompts.len(), cfg.effective_batch())?;
    let opts = GenerateOptions {
        steps: cfg.gen_tokens,
        tau,
        mode,
        top_k: cfg.top_k,
    };
    let current = params.clone();
    let batch = accumulate(params, cfg, step, |i| {
        let prompt = &ctx.prompts[streams.prompts[i]];
        let mut g = Graph::new();
        let pv = current.bind(&mut g, true);
        let rv = ctx.reference.bind(&mut g, false);
        let mut srng = streams.sample_rng(i);
        let seq = generate(&mut g, &pv, &rv, prompt, &opts, TokenSource::Sample(&mut srng))?;
        let r = ctx.reward.evaluate(&mut g, prompt, &seq.tokens)?;
        let kl = seq.total_kl(&mut g)?;
        let loss = objective_var(&mut g, r, kl, cfg.beta)?;
        let grads = g.backward(loss)?;
        Ok(SampleOutcome {
            loss: g.value(loss).item(),
            reward: g.value(r).item(),
            kl: g.value(kl).item(),
            grads: pv.gradients(&grads),
            discrete: count_discrete(&g, &seq),
            total: seq.len(),
            ratio_deviation: 0.0,
        })
    })?;
    finish_step(params, opt, cfg, step, tau, batch, None)
}

/// Vanilla GRADE: relaxed tokens forward and backward.
pub fn grade_step(
    params: &mut PolicyParams,
    ctx: &StepContext<'_>,
    opt: &mut OptimizerState,
    rng: &Rng,
    step: usize,
) -> Result<StepReport> {
    pathwise_step(Mode::Gs, params, ctx, opt, rng, step)
}

/// GRADE-STE: one-hot tokens forward, relaxed gradients backward.
pub fn grade_ste_step(
    params: &mut PolicyParams,
    ctx: &StepContext<'_>,
    opt: &mut OptimizerState,
    rng: &Rng,
    step: usize,
) -> Result<StepReport> {
    pathwise_step(Mode::Ste, params, ctx, opt, rng, step)
}

/// REINFORCE with an EMA baseline, updated after the step.
pub fn reinforce_step(
    params: &mut PolicyParams,
    ctx: &StepContext<'_>,
    opt: &mut OptimizerState,
    rng: &Rng,
    step: usize,
) -> Result<StepReport> {
    let cfg = ctx.config;
    let tau = step_tau(cfg, step)?;
    let streams = StepStreams::new(rng, step, ctx.prompts.len(), cfg.effective_batch())?;
    let opts = GenerateOptions {
        steps: cfg.gen_tokens,
        tau,
        mode: Mode::Hard,
        top_k: None,
    };
    let current = params.clone();
    let baseline = opt.baseline;
    let batch = accumulate(params, cfg, step, |i| {
        let prompt = &ctx.prompts[streams.prompts[i]];
        let mut g = Graph::new();
        let pv = current.bind(&mut g, true);
        let rv = ctx.reference.bind(&mut g, false);
        let mut srng = streams.sample_rng(i);
        let seq = generate(&mut g, &pv, &rv, prompt, &opts, TokenSource::Sample(&mut srng))?;
        let lps = step_log_probs(&mut g, &seq)?;
        let log_prob = g.add_all(&lps)?;
        let r = ctx.reward.score_ids(prompt, &seq.ids);
        let pg = reinforce_surrogate(&mut g, log_prob, r, baseline);
        let kl = seq.total_kl(&mut g)?;
        let klb = g.scale(kl, cfg.beta);
        let loss = g.add(pg, klb)?;
        let grads = g.backward(loss)?;
        Ok(SampleOutcome {
            loss: g.value(loss).item(),
            reward: r,
            kl: g.value(kl).item(),
            grads: pv.gradients(&grads),
            discrete: seq.len(),
            total: seq.len(),
            ratio_deviation: 0.0,
        })
    })?;
    let mean_reward = batch.mean_reward;
    let report = finish_step(params, opt, cfg, step, tau, batch, None)?;
    let m = cfg.reinforce.baseline_momentum;
    opt.baseline = m * opt.baseline + (1.0 - m) * mean_reward;
    Ok(report)
}

/// Dispatches to the step function of `config.method`.
pub fn method_step(
    params: &mut PolicyParams,
    ctx: &StepContext<'_>,
    opt: &mut OptimizerState,
    rng: &Rng,
    step: usize,
) -> Result<StepReport> {
    match ctx.config.method()? {
        Method::Grade => grade_step(params, ctx, opt, rng, step),
        Method::GradeSte => grade_ste_step(params, ctx, opt, rng, step),
        Method::Reinforce => reinforce_step(params, ctx, opt, rng, step),
        Method::Ppo => ppo_step(params, ctx, opt, rng, step),
    }
}

pub(crate) fn scalar_const(g: &mut Graph, x: f64) -> Var {
    g.constant(Tensor::scalar(x))
}

#[cfg(test)]
mod tests;
