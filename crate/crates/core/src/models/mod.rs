//! The recurrent policy, its frozen reference, reward models, and
//! autoregressive generation with soft, straight-through or hard tokens.

mod generate;
mod policy;
mod reward;

pub use generate::{
    generate, kl_step, GenerateOptions, Mode, Prompt, SequenceValues, SoftSequence, TokenSource,
    MAX_NEW_TOKENS,
};
pub use policy::{policy_step, soft_embed, value_estimate, ModelDims, PolicyParams, PolicyVars, PARAM_NAMES};
pub use reward::{
    accuracy, reward_analytic, reward_learned, train_reward_model, AnalyticReward, LabeledSequence,
    LearnedReward, LearnedRewardVars, RewardModel, RewardTraining,
};
