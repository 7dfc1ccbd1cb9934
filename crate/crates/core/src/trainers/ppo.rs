use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::{generate, value_estimate, GenerateOptions, Mode, PolicyParams, TokenSource};
use crate::rng::Rng;

use super::{
    accumulate, finish_step, scalar_const, step_log_probs, step_tau, OptimizerState, SampleOutcome, StepContext,
    StepReport, StepStreams,
};

/// Generalized advantage estimates with a terminal value of zero:
/// `A_t = δ_t + γλ·A_{t+1}`, `δ_t = r_t + γ·v_{t+1} − v_t`.
pub fn gae_advantages(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::invalid(format!(
            "rewards and values differ in length: {} vs {}",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    Ok(adv)
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` for a scalar ratio.
pub fn clipped_surrogate(g: &mut Graph, ratio: Var, advantage: f64, eps: f64) -> Result<Var> {
    let unclipped = g.scale(ratio, advantage);
    let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = g.scale(clipped, advantage);
    g.minimum(unclipped, clipped)
}

struct Rollout {
    prompt: usize,
    ids: Vec<usize>,
    old_log_probs: Vec<f64>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    reward: f64,
}

/// PPO with terminal reward, GAE and `epochs` full passes over the rollout,
/// one optimizer update per pass.
pub fn ppo_step(
    params: &mut PolicyParams,
    ctx: &StepContext<'_>,
    opt: &mut OptimizerState,
    rng: &Rng,
    step: usize,
) -> Result<StepReport> {
    let cfg = ctx.config;
    let pc = &cfg.ppo;
    let tau = step_tau(cfg, step)?;
    let n = cfg.effective_batch();
    let streams = StepStreams::new(rng, step, ctx.prompts.len(), n)?;
    let opts = GenerateOptions {
        steps: cfg.gen_tokens,
        tau,
        mode: Mode::Hard,
        top_k: None,
    };

    let mut rollouts = Vec::with_capacity(n);
    for i in 0..n {
        let prompt = &ctx.prompts[streams.prompts[i]];
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let rv = ctx.reference.bind(&mut g, false);
        let mut srng = streams.sample_rng(i);
        let seq = generate(&mut g, &pv, &rv, prompt, &opts, TokenSource::Sample(&mut srng))?;
        let old_log_probs: Vec<f64> = step_log_probs(&mut g, &seq)?.iter().map(|&v| g.value(v).item()).collect();
        let values = seq
            .hidden
            .iter()
            .map(|&h| value_estimate(&mut g, &pv, h).map(|v| g.value(v).item()))
            .collect::<Result<Vec<f64>>>()?;
        let reward = ctx.reward.score_ids(prompt, &seq.ids);
        let mut rewards = vec![0.0; seq.len()];
        *rewards.last_mut().expect("non-empty generation") = reward;
        let advantages = gae_advantages(&rewards, &values, pc.gamma, pc.lambda)?;
        let returns = advantages.iter().zip(&values).map(|(a, v)| a + v).collect();
        rollouts.push(Rollout {
            prompt: streams.prompts[i],
            ids: seq.ids,
            old_log_probs,
            advantages,
            returns,
            reward,
        });
    }

    let mut first = None;
    for epoch in 0..pc.epochs {
        let current = params.clone();
        let batch = accumulate(params, cfg, step, |i| {
            let ro = &rollouts[i];
            let prompt = &ctx.prompts[ro.prompt];
            let mut g = Graph::new();
            let pv = current.bind(&mut g, true);
            let rv = ctx.reference.bind(&mut g, false);
            let seq = generate(&mut g, &pv, &rv, prompt, &opts, TokenSource::Forced(&ro.ids))?;
            let lps = step_log_probs(&mut g, &seq)?;
            let steps = seq.len() as f64;
            let mut surr = Vec::with_capacity(lps.len());
            let mut sq_err = Vec::with_capacity(lps.len());
            let mut entropy = Vec::with_capacity(lps.len());
            let mut deviation: f64 = 0.0;
            for t in 0..lps.len() {
                let old = scalar_const(&mut g, ro.old_log_probs[t]);
                let diff = g.sub(lps[t], old)?;
                let ratio = g.exp(diff);
                deviation = deviation.max((g.value(ratio).item() - 1.0).abs());
                surr.push(clipped_surrogate(&mut g, ratio, ro.advantages[t], pc.clip_eps)?);

                let v = value_estimate(&mut g, &pv, seq.hidden[t])?;
                let target = scalar_const(&mut g, ro.returns[t]);
                let err = g.sub(v, target)?;
                sq_err.push(g.mul(err, err)?);

                let p = g.softmax(seq.policy_logits[t])?;
                let logp = g.log_softmax(seq.policy_logits[t])?;
                let plogp = g.dot(p, logp)?;
                entropy.push(g.neg(plogp));
            }
            let surr = g.add_all(&surr)?;
            let policy = g.scale(surr, -1.0 / steps);
            let vloss = g.add_all(&sq_err)?;
            let vloss = g.scale(vloss, pc.value_coef / steps);
            let ent = g.add_all(&entropy)?;
            let ent = g.scale(ent, -pc.entropy_coef / steps);
            let kl = seq.total_kl(&mut g)?;
            let klb = g.scale(kl, cfg.beta);
            let loss = g.add_all(&[policy, vloss, ent, klb])?;
            let grads = g.backward(loss)?;
            Ok(SampleOutcome {
                loss: g.value(loss).item(),
                reward: ro.reward,
                kl: g.value(kl).item(),
                grads: pv.gradients(&grads),
                discrete: seq.len(),
                total: seq.len(),
                ratio_deviation: deviation,
            })
        })?;
        let ratio = (epoch == 0).then_some(batch.ratio_deviation);
        let report = finish_step(params, opt, cfg, step, tau, batch, ratio)?;
        if epoch == 0 {
            first = Some(report);
        }
    }
    Ok(first.expect("at least one epoch"))
}
