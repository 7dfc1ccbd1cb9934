use serde::Serialize;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{policy_step, soft_embed, AnalyticReward, PolicyParams, PolicyVars, Prompt};

/// Largest number of continuations `enumerate_exact` will visit.
pub const MAX_ENUMERATED: u64 = 1_000_000;

#[derive(Clone, Debug)]
pub struct EnumerationResult {
    pub expected_reward: f64,
    pub gradient: PolicyParams,
    /// Gradient of the expected reward with respect to the first-step logits.
    pub first_logits_gradient: Vec<f64>,
    /// `V^T`
    pub sequences: u64,
    /// Total probability over all enumerated continuations.
    pub mass: f64,
}

#[derive(Serialize)]
struct EnumerationSummary<'a> {
    expected_reward: f64,
    sequences: u64,
    mass: f64,
    first_logits_gradient: &'a [f64],
    gradient_norm: f64,
}

impl EnumerationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&EnumerationSummary {
            expected_reward: self.expected_reward,
            sequences: self.sequences,
            mass: self.mass,
            first_logits_gradient: &self.first_logits_gradient,
            gradient_norm: self.gradient.squared_norm().sqrt(),
        })
        .expect("plain numbers serialize")
    }
}

/// Number of length-`steps` continuations, or `TooLarge` past the bound.
pub fn sequence_count(vocab: usize, steps: usize) -> Result<u64> {
    let count = (vocab as u128).checked_pow(steps as u32).unwrap_or(u128::MAX);
    if count > MAX_ENUMERATED as u128 {
        return Err(Error::TooLarge {
            sequences: count,
            bound: MAX_ENUMERATED,
        });
    }
    Ok(count as u64)
}

struct Walk {
    pv: PolicyVars,
    one_hots: Vec<Var>,
    scaled_w: Var,
    steps: usize,
    mass: f64,
}

impl Walk {
    /// Expected reward still to come from a state whose next-token logits are `logits`.
    fn value(&mut self, g: &mut Graph, logits: Var, hidden: Var, depth: usize, path: f64) -> Result<Var> {
        let p = g.softmax(logits)?;
        if depth + 1 == self.steps {
            self.mass += g.value(p).data().iter().map(|q| path * q).sum::<f64>();
            return g.dot(p, self.scaled_w);
        }
        let probs = g.value(p).data().to_vec();
        let mut children = Vec::with_capacity(probs.len());
        for (i, &q) in probs.iter().enumerate() {
            let e = soft_embed(g, self.one_hots[i], self.pv.embedding)?;
            let (l, h) = policy_step(g, &self.pv, e, hidden)?;
            children.push(self.value(g, l, h, depth + 1, path * q)?);
        }
        let future = g.concat(&children)?;
        let total = g.add(future, self.scaled_w)?;
        g.dot(p, total)
    }
}

/// `E_{y~π}[r(y)]` and its exact gradient, summing over every continuation
/// as a probability-weighted tree.
pub fn enumerate_exact(
    params: &PolicyParams,
    prompt: &Prompt,
    steps: usize,
    reward: &AnalyticReward,
) -> Result<EnumerationResult> {
    let vocab = params.dims().vocab;
    if reward.vocab() != vocab {
        return Err(Error::invalid(format!(
            "reward vocabulary {} does not match policy vocabulary {vocab}",
            reward.vocab()
        )));
    }
    if steps == 0 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    let sequences = sequence_count(vocab, steps)?;
    if let Some(&id) = prompt.ids().iter().find(|&&i| i >= vocab) {
        return Err(Error::invalid(format!("prompt token {id} outside vocabulary of {vocab}")));
    }

    let mut g = Graph::new();
    let pv = params.bind(&mut g, true);
    let one_hots: Vec<Var> = (0..vocab).map(|i| g.constant(Tensor::one_hot(vocab, i))).collect();
    let scaled_w = g.constant(reward.weights.map(|w| w / steps as f64));

    let mut hidden = pv.zero_hidden(&mut g);
    let mut logits = None;
    for &id in prompt.ids() {
        let e = soft_embed(&mut g, one_hots[id], pv.embedding)?;
        let (l, h) = policy_step(&mut g, &pv, e, hidden)?;
        hidden = h;
        logits = Some(l);
    }
    let logits = logits.expect("non-empty prompt");

    let mut walk = Walk {
        pv,
        one_hots,
        scaled_w,
        steps,
        mass: 0.0,
    };
    let expected = walk.value(&mut g, logits, hidden, 0, 1.0)?;
    let grads = g.backward(expected)?;
    Ok(EnumerationResult {
        expected_reward: g.value(expected).item(),
        gradient: pv.gradients(&grads),
        first_logits_gradient: grads.wrt(logits).into_data(),
        sequences,
        mass: walk.mass,
    })
}
