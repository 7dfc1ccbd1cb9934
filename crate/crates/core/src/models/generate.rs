use serde::{Deserialize, Serialize};

use super::policy::{policy_step, soft_embed, PolicyVars};
use crate::autograd::{argmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::relaxation::{
    gumbel_noise, gumbel_softmax, sample_hard, straight_through, topk_gumbel_softmax, SimplexVector,
    SparseSimplex,
};
use crate::rng::Rng;

/// Upper bound on generated continuation length.
pub const MAX_NEW_TOKENS: usize = 64;

/// Hard token ids conditioning a continuation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Prompt(Vec<usize>);

impl Prompt {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("prompt must hold at least one token"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("prompt token {bad} outside vocabulary of {vocab}")));
        }
        Ok(Prompt(ids))
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// How each generated token is represented when fed back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Relaxed Gumbel-Softmax token.
    Gs,
    /// Straight-through: one-hot forward, relaxed backward.
    Ste,
    /// Sampled discrete token; no gradient through its value.
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub steps: usize,
    pub tau: f64,
    pub mode: Mode,
    pub top_k: Option<usize>,
}

/// Where HARD-mode tokens come from.
pub enum TokenSource<'a> {
    Sample(&'a mut Rng),
    /// Replay a fixed id sequence (HARD mode only).
    Forced(&'a [usize]),
}

/// One generated continuation recorded on a graph.
#[derive(Clone, Debug)]
pub struct SoftSequence {
    pub mode: Mode,
    /// Forward token representation fed to the next step and to the reward.
    pub tokens: Vec<Var>,
    /// The relaxed sample behind each STE token; equals `tokens` otherwise.
    pub relaxed: Vec<Var>,
    /// Argmax of each forward token (the sampled id in HARD mode).
    pub ids: Vec<usize>,
    /// Retained indices per step when the top-k path is active.
    pub support: Vec<Option<Vec<usize>>>,
    /// Gumbel noise used per step (aligned with `support` under top-k).
    pub noise: Vec<Tensor>,
    pub policy_logits: Vec<Var>,
    pub ref_logits: Vec<Var>,
    /// Policy hidden state from which `policy_logits[t]` was read.
    pub hidden: Vec<Var>,
    pub kl: Vec<Var>,
}

/// Graph-independent values of a [`SoftSequence`].
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceValues {
    pub mode: Mode,
    pub tokens: Vec<Vec<f64>>,
    pub ids: Vec<usize>,
    pub policy_logits: Vec<Vec<f64>>,
    pub ref_logits: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub kl: Vec<f64>,
}

impl SoftSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn values(&self, g: &Graph) -> SequenceValues {
        let vecs = |vs: &[Var]| vs.iter().map(|&v| g.value(v).data().to_vec()).collect();
        SequenceValues {
            mode: self.mode,
            tokens: vecs(&self.tokens),
            ids: self.ids.clone(),
            policy_logits: vecs(&self.policy_logits),
            ref_logits: vecs(&self.ref_logits),
            hidden: vecs(&self.hidden),
            kl: self.kl.iter().map(|&v| g.value(v).item()).collect(),
        }
    }

    /// Forward tokens as dense simplex vectors.
    pub fn soft_tokens(&self, g: &Graph) -> Result<Vec<SimplexVector>> {
        self.tokens
            .iter()
            .map(|&v| SimplexVector::new(g.value(v).data().to_vec()))
            .collect()
    }

    /// Relaxed tokens in sparse form, for steps generated on the top-k path.
    pub fn sparse_tokens(&self, g: &Graph) -> Result<Vec<Option<SparseSimplex>>> {
        self.support
            .iter()
            .zip(&self.relaxed)
            .map(|(sup, &v)| {
                sup.as_ref()
                    .map(|idx| {
                        let w = g.value(v).data();
                        let weights = idx.iter().map(|&i| w[i]).collect();
                        SparseSimplex::new(idx.clone(), weights, w.len())
                    })
                    .transpose()
            })
            .collect()
    }

    /// Sum of per-step KL terms along the trajectory.
    pub fn total_kl(&self, g: &mut Graph) -> Result<Var> {
        g.add_all(&self.kl)
    }
}

/// `KL(softmax(policy) ‖ softmax(reference))`; the reference side is detached.
pub fn kl_step(g: &mut Graph, policy_logits: Var, ref_logits: Var) -> Result<Var> {
    let r = g.stop_gradient(ref_logits);
    let p = g.softmax(policy_logits)?;
    let log_p = g.log_softmax(policy_logits)?;
    let log_q = g.log_softmax(r)?;
    let diff = g.sub(log_p, log_q)?;
    g.dot(p, diff)
}

fn hard_row(g: &mut Graph, vocab: usize, id: usize, embedding: Var) -> Result<Var> {
    let one = g.constant(Tensor::one_hot(vocab, id));
    soft_embed(g, one, embedding)
}

/// Consumes the prompt, then produces `opts.steps` tokens autoregressively.
///
/// Policy and reference read the same token representation at every step:
/// the reference embeds a detached copy through its own frozen embedding.
pub fn generate(
    g: &mut Graph,
    policy: &PolicyVars,
    reference: &PolicyVars,
    prompt: &Prompt,
    opts: &GenerateOptions,
    mut source: TokenSource<'_>,
) -> Result<SoftSequence> {
    let vocab = policy.dims.vocab;
    if reference.dims != policy.dims {
        return Err(Error::invalid("reference and policy dimensions differ"));
    }
    if opts.steps == 0 || opts.steps > MAX_NEW_TOKENS {
        return Err(Error::invalid(format!(
            "steps must be in [1, {MAX_NEW_TOKENS}], got {}",
            opts.steps
        )));
    }
    if let Some(k) = opts.top_k {
        if k == 0 || k > vocab {
            return Err(Error::invalid(format!("top_k must be in [1, {vocab}], got {k}")));
        }
    }
    match (&source, opts.mode) {
        (TokenSource::Forced(ids), Mode::Hard) => {
            if ids.len() != opts.steps || ids.iter().any(|&i| i >= vocab) {
                return Err(Error::invalid("forced ids must match steps and vocabulary"));
            }
        }
        (TokenSource::Forced(_), _) => {
            return Err(Error::invalid("forced tokens are only valid in HARD mode"));
        }
        _ => {}
    }
    for &id in prompt.ids() {
        if id >= vocab {
            return Err(Error::invalid(format!("prompt token {id} outside vocabulary of {vocab}")));
        }
    }

    let mut h_pol = policy.zero_hidden(g);
    let mut h_ref = reference.zero_hidden(g);
    let mut l_pol = None;
    let mut l_ref = None;
    for &id in prompt.ids() {
        let e = hard_row(g, vocab, id, policy.embedding)?;
        let (l, h) = policy_step(g, policy, e, h_pol)?;
        h_pol = h;
        l_pol = Some(l);
        let e = hard_row(g, vocab, id, reference.embedding)?;
        let (l, h) = policy_step(g, reference, e, h_ref)?;
        h_ref = h;
        l_ref = Some(l);
    }
    let (mut l_pol, mut l_ref) = (l_pol.expect("non-empty prompt"), l_ref.expect("non-empty prompt"));

    let mut seq = SoftSequence {
        mode: opts.mode,
        tokens: Vec::with_capacity(opts.steps),
        relaxed: Vec::with_capacity(opts.steps),
        ids: Vec::with_capacity(opts.steps),
        support: Vec::with_capacity(opts.steps),
        noise: Vec::with_capacity(opts.steps),
        policy_logits: Vec::with_capacity(opts.steps),
        ref_logits: Vec::with_capacity(opts.steps),
        hidden: Vec::with_capacity(opts.steps),
        kl: Vec::with_capacity(opts.steps),
    };

    for t in 0..opts.steps {
        seq.policy_logits.push(l_pol);
        seq.ref_logits.push(l_ref);
        seq.hidden.push(h_pol);
        let kl = kl_step(g, l_pol, l_ref)?;
        seq.kl.push(kl);

        let (token, relaxed) = match opts.mode {
            Mode::Hard => {
                let id = match &mut source {
                    TokenSource::Sample(rng) => sample_hard(g.value(l_pol).data(), rng),
                    TokenSource::Forced(ids) => ids[t],
                };
                seq.support.push(None);
                seq.noise.push(Tensor::vector(Vec::new()));
                let tok = g.constant(Tensor::one_hot(vocab, id));
                (tok, tok)
            }
            Mode::Gs | Mode::Ste => {
                let TokenSource::Sample(rng) = &mut source else {
                    unreachable!("validated above")
                };
                let soft = match opts.top_k {
                    Some(k) => {
                        let noise = gumbel_noise(rng, k);
                        let sparse = topk_gumbel_softmax(g, l_pol, k, &noise, opts.tau)?;
                        seq.support.push(Some(sparse.indices.clone()));
                        seq.noise.push(noise);
                        sparse.dense(g, vocab)?
                    }
                    None => {
                        let noise = gumbel_noise(rng, vocab);
                        let soft = gumbel_softmax(g, l_pol, &noise, opts.tau)?;
                        seq.support.push(None);
                        seq.noise.push(noise);
                        soft
                    }
                };
                if opts.mode == Mode::Ste {
                    (straight_through(g, soft)?, soft)
                } else {
                    (soft, soft)
                }
            }
        };
        seq.ids.push(argmax(g.value(token).data()));
        seq.tokens.push(token);
        seq.relaxed.push(relaxed);

        if t + 1 < opts.steps {
            let e = soft_embed(g, token, policy.embedding)?;
            let (l, h) = policy_step(g, policy, e, h_pol)?;
            l_pol = l;
            h_pol = h;
            let detached = g.stop_gradient(token);
            let e = soft_embed(g, detached, reference.embedding)?;
            let (l, h) = policy_step(g, reference, e, h_ref)?;
            l_ref = l;
            h_ref = h;
        }
    }
    Ok(seq)
}
