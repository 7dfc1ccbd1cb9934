use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::models::{
    train_reward_model, AnalyticReward, LabeledSequence, LearnedReward, ModelDims, PolicyParams, Prompt, RewardModel,
};
use crate::rng::Rng;

use super::config::{RewardKind, TaskSpec};

const TASK_STREAM: u64 = 1;
const INIT_STREAM: u64 = 1;
const POOL_STREAM: u64 = 2;
const REWARD_STREAM: u64 = 3;

/// Everything a run needs besides the trainer settings.
#[derive(Clone, Debug)]
pub struct Task {
    pub dims: ModelDims,
    pub init: PolicyParams,
    pub train: Vec<Prompt>,
    pub val: Vec<Prompt>,
    pub test: Vec<Prompt>,
    pub reward: RewardModel,
    /// Training-set accuracy of a learned reward model.
    pub reward_accuracy: Option<f64>,
}

/// The stream a seed's task is built from.
pub fn task_rng(seed: u64) -> Rng {
    Rng::new(seed).split(TASK_STREAM)
}

pub fn dims(spec: &TaskSpec) -> ModelDims {
    ModelDims {
        vocab: spec.vocab_size,
        embed: spec.embed_dim,
        hidden: spec.hidden_dim,
    }
}

pub fn init_policy(spec: &TaskSpec, rng: &Rng) -> Result<PolicyParams> {
    PolicyParams::init(dims(spec), spec.init_scale, &mut rng.split(INIT_STREAM))
}

/// Draws prompts of `spec.prompt_len` uniform tokens. Pools are filled in
/// order and no id-sequence is ever repeated, within or across pools.
pub fn draw_prompts(spec: &TaskSpec, sizes: &[usize], rng: &Rng) -> Result<Vec<Vec<Prompt>>> {
    let total: usize = sizes.iter().sum();
    let capacity = (spec.vocab_size as u128).checked_pow(spec.prompt_len as u32).unwrap_or(u128::MAX);
    if total as u128 > capacity {
        return Err(Error::Config(format!(
            "{total} distinct prompts requested but only {capacity} exist with vocab_size {} and prompt_len {}",
            spec.vocab_size, spec.prompt_len
        )));
    }
    let mut seen = HashSet::with_capacity(total);
    let mut pools = Vec::with_capacity(sizes.len());
    for (k, &n) in sizes.iter().enumerate() {
        let mut r = rng.split(POOL_STREAM).split(k as u64);
        let mut pool = Vec::with_capacity(n);
        while pool.len() < n {
            let ids: Vec<usize> = (0..spec.prompt_len).map(|_| r.below(spec.vocab_size)).collect();
            if seen.insert(ids.clone()) {
                pool.push(Prompt::new(ids, spec.vocab_size)?);
            }
        }
        pools.push(pool);
    }
    Ok(pools)
}

/// Labelled sequences of `prompt_len + gen_tokens` tokens. The label is drawn
/// first; a positive sequence has a strict majority of tokens from the upper
/// half of the vocabulary, a negative one does not.
pub fn labeled_sequences(vocab: usize, prompt_len: usize, gen_tokens: usize, n: usize, rng: &mut Rng) -> Result<Vec<LabeledSequence>> {
    let len = prompt_len + gen_tokens;
    let split = vocab / 2;
    (0..n)
        .map(|_| {
            let label = rng.bernoulli(0.5);
            let positives = if label {
                len / 2 + 1 + rng.below(len - len / 2)
            } else {
                rng.below(len / 2 + 1)
            };
            let mut upper: Vec<bool> = (0..len).map(|i| i < positives).collect();
            rng.shuffle(&mut upper);
            let ids: Vec<usize> = upper
                .iter()
                .map(|&u| if u { split + rng.below(vocab - split) } else { rng.below(split) })
                .collect();
            Ok(LabeledSequence {
                prompt: Prompt::new(ids[..prompt_len].to_vec(), vocab)?,
                tokens: ids[prompt_len..].to_vec(),
                label,
            })
        })
        .collect()
}

/// Initial policy, the three prompt pools and the reward for one seed.
pub fn build_task(spec: &TaskSpec, gen_tokens: usize, rng: &Rng) -> Result<Task> {
    let init = init_policy(spec, rng)?;
    let mut pools = draw_prompts(spec, &[spec.train_prompts, spec.val_prompts, spec.test_prompts], rng)?.into_iter();
    let (train, val, test) = (pools.next().unwrap(), pools.next().unwrap(), pools.next().unwrap());
    let (reward, reward_accuracy) = match spec.reward.kind {
        RewardKind::Analytic => (RewardModel::Analytic(AnalyticReward::new(spec.analytic_weights())), None),
        RewardKind::Learned => {
            let r = &spec.reward;
            let mut rr = rng.split(REWARD_STREAM);
            let data = labeled_sequences(spec.vocab_size, spec.prompt_len, gen_tokens, r.samples, &mut rr)?;
            let init = LearnedReward::init(spec.vocab_size, r.embed_dim, r.hidden_dim, &mut rr);
            let trained = train_reward_model(init, &data, r.epochs, r.learning_rate)?;
            log::info!("learned reward accuracy {:.3}", trained.accuracy);
            (RewardModel::Learned(trained.params), Some(trained.accuracy))
        }
    };
    Ok(Task {
        dims: dims(spec),
        init,
        train,
        val,
        test,
        reward,
        reward_accuracy,
    })
}

/// The tiny instance used by the oracle commands: the initial policy and the
/// first training prompt, with the analytic reward.
pub fn oracle_instance(spec: &TaskSpec, rng: &Rng) -> Result<(PolicyParams, Prompt, AnalyticReward)> {
    if spec.reward.kind != RewardKind::Analytic {
        return Err(Error::Config("oracle commands need task.reward.kind = \"analytic\"".into()));
    }
    let init = init_policy(spec, rng)?;
    let prompt = draw_prompts(spec, &[1], rng)?.remove(0).remove(0);
    Ok((init, prompt, AnalyticReward::new(spec.analytic_weights())))
}
