use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::models::{generate, GenerateOptions, Mode, PolicyParams, Prompt, RewardModel, TokenSource};
use crate::rng::Rng;

use super::{method_step, OptimizerState, StepContext, StepReport, TrainerConfig};

const MAX_CONSECUTIVE_NON_FINITE: usize = 3;

const STEP_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

pub struct TrainSetup<'a> {
    /// Must have `method` set.
    pub config: &'a TrainerConfig,
    /// Initial policy; a frozen copy becomes the KL reference.
    pub init: PolicyParams,
    pub reward: &'a RewardModel,
    pub train_prompts: &'a [Prompt],
    pub val_prompts: &'a [Prompt],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub val_reward: f64,
    pub params: PolicyParams,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// One report per applied optimizer step.
    pub reports: Vec<StepReport>,
    /// `(step, mean validation reward)` at each evaluation step.
    pub validation: Vec<(usize, f64)>,
    pub params: PolicyParams,
    /// Highest validation reward seen; ties keep the earlier checkpoint.
    pub best: Option<Checkpoint>,
    /// Steps skipped because the loss or update was non-finite.
    pub skipped: Vec<usize>,
}

/// Mean reward of HARD continuations, `samples` per prompt.
pub fn evaluate_policy(
    params: &PolicyParams,
    reward: &RewardModel,
    prompts: &[Prompt],
    gen_tokens: usize,
    samples: usize,
    rng: &Rng,
) -> Result<f64> {
    if prompts.is_empty() || samples == 0 {
        return Err(Error::invalid("evaluation needs prompts and at least one sample"));
    }
    let opts = GenerateOptions {
        steps: gen_tokens,
        tau: 1.0,
        mode: Mode::Hard,
        top_k: None,
    };
    let mut total = 0.0;
    for (i, prompt) in prompts.iter().enumerate() {
        let prng = rng.split(i as u64);
        for s in 0..samples {
            let mut g = Graph::new();
            let pv = params.bind(&mut g, false);
            let mut srng = prng.split(s as u64);
            let seq = generate(&mut g, &pv, &pv, prompt, &opts, TokenSource::Sample(&mut srng))?;
            total += reward.score_ids(prompt, &seq.ids);
        }
    }
    Ok(total / (prompts.len() * samples) as f64)
}

/// Runs `config.max_steps` steps of the configured method.
pub fn train(setup: &TrainSetup<'_>, rng: &Rng) -> Result<TrainOutcome> {
    let cfg = setup.config;
    cfg.validate()?;
    let method = cfg.method()?;
    let reference = setup.init.clone();
    let mut params = setup.init.clone();
    let mut opt = OptimizerState::new(&params);
    let ctx = StepContext {
        reference: &reference,
        reward: setup.reward,
        prompts: setup.train_prompts,
        config: cfg,
    };
    let step_rng = rng.split(STEP_STREAM);
    let val_rng = rng.split(VALIDATION_STREAM);

    let mut out = TrainOutcome {
        reports: Vec::with_capacity(cfg.max_steps),
        validation: Vec::new(),
        params: params.clone(),
        best: None,
        skipped: Vec::new(),
    };
    let mut consecutive = 0;
    for step in 1..=cfg.max_steps {
        match method_step(&mut params, &ctx, &mut opt, &step_rng, step) {
            Ok(report) => {
                consecutive = 0;
                log::debug!(
                    "{method} step {step}: reward {:.4} kl {:.4} grad_norm {:.4}",
                    report.mean_reward,
                    report.mean_kl,
                    report.grad_norm
                );
                out.reports.push(report);
            }
            Err(e @ Error::NonFiniteLoss { .. }) => {
                log::warn!("{method}: skipping update: {e}");
                out.skipped.push(step);
                consecutive += 1;
                if consecutive >= MAX_CONSECUTIVE_NON_FINITE {
                    return Err(Error::NonFiniteLoss {
                        step,
                        detail: format!("{MAX_CONSECUTIVE_NON_FINITE} consecutive non-finite steps, aborting run"),
                    });
                }
            }
            Err(e) => return Err(e),
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let val = evaluate_policy(
                &params,
                setup.reward,
                setup.val_prompts,
                cfg.gen_tokens,
                cfg.eval_samples,
                &val_rng.split(step as u64),
            )?;
            out.validation.push((step, val));
            if out.best.as_ref().is_none_or(|b| val > b.val_reward) {
                out.best = Some(Checkpoint {
                    step,
                    val_reward: val,
                    params: params.clone(),
                });
            }
        }
    }
    out.params = params;
    Ok(out)
}
