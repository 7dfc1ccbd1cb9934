use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::MAX_NEW_TOKENS;
use crate::relaxation::TemperatureSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grade,
    GradeSte,
    Reinforce,
    Ppo,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Grade, Method::GradeSte, Method::Reinforce, Method::Ppo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Grade => "grade",
            Method::GradeSte => "grade_ste",
            Method::Reinforce => "reinforce",
            Method::Ppo => "ppo",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub epochs: usize,
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            epochs: 4,
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceConfig {
    pub baseline_momentum: f64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            baseline_momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TauConfig {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: usize,
}

impl Default for TauConfig {
    fn default() -> Self {
        TauConfig {
            start: 2.0,
            end: 0.5,
            anneal_steps: 2000,
        }
    }
}

impl TauConfig {
    pub fn schedule(&self) -> Result<TemperatureSchedule> {
        TemperatureSchedule::new(self.start, self.end, self.anneal_steps)
    }
}

/// Optimization settings shared by all four methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    /// Set per run by the harness from the top-level `methods` list.
    #[serde(skip)]
    pub method: Option<Method>,
    pub learning_rate: f64,
    /// KL coefficient.
    pub beta: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_steps: usize,
    /// Tokens generated per prompt.
    pub gen_tokens: usize,
    pub top_k: Option<usize>,
    pub grad_clip: f64,
    pub eval_every: usize,
    /// HARD continuations drawn per prompt when measuring validation or test reward.
    pub eval_samples: usize,
    pub tau: TauConfig,
    pub ppo: PpoConfig,
    pub reinforce: ReinforceConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            method: None,
            learning_rate: 1e-2,
            beta: 0.1,
            batch_size: 4,
            grad_accum: 4,
            max_steps: 500,
            gen_tokens: 8,
            top_k: None,
            grad_clip: 1.0,
            eval_every: 100,
            eval_samples: 4,
            tau: TauConfig::default(),
            ppo: PpoConfig::default(),
            reinforce: ReinforceConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = Some(method);
        self
    }

    pub fn method(&self) -> Result<Method> {
        self.method.ok_or_else(|| Error::Config("no training method selected".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be >= 0, got {}", self.learning_rate));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be >= 1".into());
        }
        if self.gen_tokens == 0 || self.gen_tokens > MAX_NEW_TOKENS {
            return bad(format!("gen_tokens must be in [1, {MAX_NEW_TOKENS}], got {}", self.gen_tokens));
        }
        if self.top_k == Some(0) {
            return bad("top_k must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be > 0, got {}", self.grad_clip));
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be >= 1".into());
        }
        self.tau.schedule().map_err(|e| Error::Config(e.to_string()))?;
        let p = &self.ppo;
        if !(p.clip_eps > 0.0 && p.clip_eps < 1.0) {
            return bad(format!("ppo.clip_eps must be in (0, 1), got {}", p.clip_eps));
        }
        if !(p.gamma > 0.0 && p.gamma <= 1.0) || !(p.lambda > 0.0 && p.lambda <= 1.0) {
            return bad(format!("ppo.gamma and ppo.lambda must be in (0, 1], got {} and {}", p.gamma, p.lambda));
        }
        if p.epochs == 0 {
            return bad("ppo.epochs must be >= 1".into());
        }
        let m = self.reinforce.baseline_momentum;
        if !(0.0..1.0).contains(&m) {
            return bad(format!("reinforce.baseline_momentum must be in [0, 1), got {m}"));
        }
        Ok(())
    }

    /// Samples contributing to one optimizer step.
    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }
}
