use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::Rng;

use super::generate::Prompt;

/// Linear reward `(1/T) Σ_t token_t · w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticReward {
    pub weights: Tensor,
}

impl AnalyticReward {
    pub fn new(weights: Vec<f64>) -> Self {
        AnalyticReward {
            weights: Tensor::vector(weights),
        }
    }

    pub fn vocab(&self) -> usize {
        self.weights.len()
    }

    /// Mean of `w[id]` over a hard continuation.
    pub fn score_ids(&self, ids: &[usize]) -> f64 {
        ids.iter().map(|&i| self.weights.data()[i]).sum::<f64>() / ids.len() as f64
    }
}

pub fn reward_analytic(g: &mut Graph, w: &Tensor, tokens: &[Var]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::invalid("reward needs at least one token"));
    }
    let wv = g.constant(w.clone());
    let mut terms = Vec::with_capacity(tokens.len());
    for &t in tokens {
        terms.push(g.dot(t, wv)?);
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / tokens.len() as f64))
}

/// Mean-pooled embedding classifier:
/// `sigmoid(u · tanh(H · pool + b) + u_b)` where `pool` averages the
/// embeddings of every prompt and continuation position.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedReward {
    /// `vocab × embed`
    pub embedding: Tensor,
    /// `hidden × embed`
    pub hidden_map: Tensor,
    pub hidden_bias: Tensor,
    pub head: Tensor,
    /// scalar
    pub head_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LearnedRewardVars {
    pub embedding: Var,
    pub hidden_map: Var,
    pub hidden_bias: Var,
    pub head: Var,
    pub head_bias: Var,
    pub vocab: usize,
}

impl LearnedReward {
    pub fn init(vocab: usize, embed: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut fill = |shape: &[usize], fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.uniform_range(-s, s);
            }
            t
        };
        LearnedReward {
            embedding: fill(&[vocab, embed], vocab),
            hidden_map: fill(&[hidden, embed], embed),
            hidden_bias: fill(&[hidden], embed),
            head: fill(&[hidden], hidden),
            head_bias: Tensor::scalar(0.0),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    fn tensors(&self) -> [&Tensor; 5] {
        [
            &self.embedding,
            &self.hidden_map,
            &self.hidden_bias,
            &self.head,
            &self.head_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.embedding,
            &mut self.hidden_map,
            &mut self.hidden_bias,
            &mut self.head,
            &mut self.head_bias,
        ]
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LearnedRewardVars {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        LearnedRewardVars {
            embedding: put(&self.embedding),
            hidden_map: put(&self.hidden_map),
            hidden_bias: put(&self.hidden_bias),
            head: put(&self.head),
            head_bias: put(&self.head_bias),
            vocab: self.vocab(),
        }
    }

    /// Score of a hard sequence computed directly from embedding rows.
    pub fn score_ids(&self, prompt: &Prompt, ids: &[usize]) -> f64 {
        let d = self.embedding.cols();
        let n = (prompt.len() + ids.len()) as f64;
        let mut pool = vec![0.0; d];
        for &i in prompt.ids().iter().chain(ids) {
            for (p, e) in pool.iter_mut().zip(self.embedding.row(i)) {
                *p += e;
            }
        }
        pool.iter_mut().for_each(|p| *p /= n);
        let mut z = self.head_bias.item();
        for j in 0..self.hidden_map.rows() {
            let pre: f64 = self
                .hidden_map
                .row(j)
                .iter()
                .zip(&pool)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + self.hidden_bias.data()[j];
            z += self.head.data()[j] * pre.tanh();
        }
        1.0 / (1.0 + (-z).exp())
    }
}

fn learned_logit(g: &mut Graph, rp: &LearnedRewardVars, prompt: &Prompt, tokens: &[Var]) -> Result<Var> {
    let vocab = rp.vocab;
    for &t in tokens {
        let len = g.value(t).len();
        if len != vocab {
            return Err(Error::invalid(format!(
                "reward vocabulary {vocab} does not match policy vocabulary {len}"
            )));
        }
    }
    if let Some(&bad) = prompt.ids().iter().find(|&&i| i >= vocab) {
        return Err(Error::invalid(format!(
            "prompt token {bad} outside reward vocabulary of {vocab}"
        )));
    }
    // Mean pooling is linear, so pool the token weights first and embed once.
    let mut counts = vec![0.0; vocab];
    for &i in prompt.ids() {
        counts[i] += 1.0;
    }
    let mut weights = g.constant(Tensor::vector(counts));
    for &t in tokens {
        weights = g.add(weights, t)?;
    }
    let n = (prompt.len() + tokens.len()) as f64;
    let mean = g.scale(weights, 1.0 / n);
    let pool = g.vecmat(mean, rp.embedding)?;
    let pre = g.matvec(rp.hidden_map, pool)?;
    let pre = g.add(pre, rp.hidden_bias)?;
    let hid = g.tanh(pre);
    let z = g.dot(rp.head, hid)?;
    g.add(z, rp.head_bias)
}

pub fn reward_learned(g: &mut Graph, rp: &LearnedRewardVars, prompt: &Prompt, tokens: &[Var]) -> Result<Var> {
    let z = learned_logit(g, rp, prompt, tokens)?;
    Ok(g.sigmoid(z))
}

/// Reward used by a training run.
#[derive(Clone, Debug, PartialEq)]
pub enum RewardModel {
    Analytic(AnalyticReward),
    Learned(LearnedReward),
}

impl RewardModel {
    pub fn vocab(&self) -> usize {
        match self {
            RewardModel::Analytic(a) => a.vocab(),
            RewardModel::Learned(l) => l.vocab(),
        }
    }

    /// Differentiable reward of a generated continuation. Reward parameters
    /// are recorded as constants.
    pub fn evaluate(&self, g: &mut Graph, prompt: &Prompt, tokens: &[Var]) -> Result<Var> {
        match self {
            RewardModel::Analytic(a) => {
                if let Some(&t) = tokens.iter().find(|&&t| g.value(t).len() != a.vocab()) {
                    return Err(Error::invalid(format!(
                        "reward vocabulary {} does not match policy vocabulary {}",
                        a.vocab(),
                        g.value(t).len()
                    )));
                }
                reward_analytic(g, &a.weights, tokens)
            }
            RewardModel::Learned(l) => {
                let rv = l.bind(g, false);
                reward_learned(g, &rv, prompt, tokens)
            }
        }
    }

    pub fn score_ids(&self, prompt: &Prompt, ids: &[usize]) -> f64 {
        match self {
            RewardModel::Analytic(a) => a.score_ids(ids),
            RewardModel::Learned(l) => l.score_ids(prompt, ids),
        }
    }
}

/// A hard sequence with a binary preference label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub prompt: Prompt,
    pub tokens: Vec<usize>,
    pub label: bool,
}

#[derive(Clone, Debug)]
pub struct RewardTraining {
    pub params: LearnedReward,
    /// Mean binary cross-entropy before each epoch's update.
    pub losses: Vec<f64>,
    pub accuracy: f64,
}

pub fn accuracy(params: &LearnedReward, data: &[LabeledSequence]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .iter()
        .filter(|ex| (params.score_ids(&ex.prompt, &ex.tokens) > 0.5) == ex.label)
        .count();
    hits as f64 / data.len() as f64
}

/// Full-batch binary cross-entropy training with Adam; one update per epoch.
pub fn train_reward_model(
    params: LearnedReward,
    data: &[LabeledSequence],
    epochs: usize,
    lr: f64,
) -> Result<RewardTraining> {
    if data.is_empty() {
        return Err(Error::invalid("reward training needs labelled data"));
    }
    let vocab = params.vocab();
    let mut params = params;
    let mut adam = Adam::new(params.tensors().iter().map(|t| t.shape().to_vec()).collect());
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut g = Graph::new();
        let rv = params.bind(&mut g, true);
        let zero = g.constant(Tensor::scalar(0.0));
        let mut terms = Vec::with_capacity(data.len());
        for ex in data {
            let toks: Vec<Var> = ex
                .tokens
                .iter()
                .map(|&i| g.constant(Tensor::one_hot(vocab, i)))
                .collect();
            let z = learned_logit(&mut g, &rv, &ex.prompt, &toks)?;
            // log σ(z) and log(1 − σ(z)) as a two-way log-softmax over [z, 0].
            let pair = g.concat(&[z, zero])?;
            let ls = g.log_softmax(pair)?;
            terms.push(g.select(ls, if ex.label { 0 } else { 1 })?);
        }
        let total = g.add_all(&terms)?;
        let loss = g.scale(total, -1.0 / data.len() as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: losses.len(),
                detail: "reward model cross-entropy".into(),
            });
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let vars = [rv.embedding, rv.hidden_map, rv.hidden_bias, rv.head, rv.head_bias];
        let grad_tensors: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
        let mut targets = params.tensors_mut();
        adam.update(&mut targets, &grad_tensors.iter().collect::<Vec<_>>(), lr);
    }
    let accuracy = accuracy(&params, data);
    Ok(RewardTraining {
        params,
        losses,
        accuracy,
    })
}
