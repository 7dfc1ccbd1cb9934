//! Differentiable alignment of tiny autoregressive policies through
//! Gumbel-Softmax token generation, with REINFORCE and PPO baselines and
//! exact enumeration oracles for checking gradient estimators.

pub mod autograd;
pub mod error;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod relaxation;
pub mod rng;
pub mod harness;
pub mod stats;
pub mod trainers;

pub use error::{Error, Result};
