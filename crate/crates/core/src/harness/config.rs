use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainers::{Method, TrainerConfig};

/// Environment variable that overrides `output_dir`.
pub const OUT_DIR_ENV: &str = "GRADELAB_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Analytic,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Analytic per-token weights; defaults to 1 on the first quarter of the
    /// vocabulary and 0 elsewhere.
    pub weights: Option<Vec<f64>>,
    /// Learned reward: labelled sequences generated for training.
    pub samples: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec {
            kind: RewardKind::Analytic,
            weights: None,
            samples: 1000,
            embed_dim: 8,
            hidden_dim: 16,
            epochs: 300,
            learning_rate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub prompt_len: usize,
    pub train_prompts: usize,
    pub val_prompts: usize,
    pub test_prompts: usize,
    /// Policy initialisation scale; 0 gives all-zero parameters.
    pub init_scale: f64,
    pub reward: RewardSpec,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab_size: 16,
            embed_dim: 8,
            hidden_dim: 16,
            prompt_len: 4,
            train_prompts: 64,
            val_prompts: 16,
            test_prompts: 64,
            init_scale: 1.0,
            reward: RewardSpec::default(),
        }
    }
}

impl TaskSpec {
    pub fn analytic_weights(&self) -> Vec<f64> {
        match &self.reward.weights {
            Some(w) => w.clone(),
            None => default_weights(self.vocab_size),
        }
    }
}

pub fn default_weights(vocab: usize) -> Vec<f64> {
    let favoured = (vocab / 4).max(1);
    (0..vocab).map(|i| if i < favoured { 1.0 } else { 0.0 }).collect()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, try_from = "RawRunConfig")]
pub struct RunConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub trainer: TrainerConfig,
}

/// On-disk form: `method`/`seed` are shorthands for one-element lists.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    methods: Option<Vec<Method>>,
    method: Option<Method>,
    seeds: Option<Vec<u64>>,
    seed: Option<u64>,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
    #[serde(default)]
    task: TaskSpec,
    #[serde(default)]
    trainer: TrainerConfig,
}

fn one_or_many<T>(many: Option<Vec<T>>, one: Option<T>, plural: &str, singular: &str) -> Result<Vec<T>, String> {
    match (many, one) {
        (Some(v), None) => Ok(v),
        (None, Some(x)) => Ok(vec![x]),
        (Some(_), Some(_)) => Err(format!("give either `{plural}` or `{singular}`, not both")),
        (None, None) => Err(format!("missing field `{plural}` (or `{singular}`)")),
    }
}

impl TryFrom<RawRunConfig> for RunConfig {
    type Error = String;

    fn try_from(raw: RawRunConfig) -> Result<Self, String> {
        Ok(RunConfig {
            methods: one_or_many(raw.methods, raw.method, "methods", "method")?,
            seeds: one_or_many(raw.seeds, raw.seed, "seeds", "seed")?,
            output_dir: raw.output_dir,
            task: raw.task,
            trainer: raw.trainer,
        })
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return bad("methods must list at least one method".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return bad("methods contains duplicates".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds contains duplicates".into());
        }
        let t = &self.task;
        if t.vocab_size < 2 || t.embed_dim == 0 || t.hidden_dim == 0 {
            return bad("task needs vocab_size >= 2 and positive embed_dim, hidden_dim".into());
        }
        if t.prompt_len == 0 {
            return bad("task.prompt_len must be >= 1".into());
        }
        if t.train_prompts == 0 || t.val_prompts == 0 || t.test_prompts == 0 {
            return bad("prompt pool sizes must be positive".into());
        }
        if !(t.init_scale >= 0.0) || !t.init_scale.is_finite() {
            return bad(format!("task.init_scale must be >= 0, got {}", t.init_scale));
        }
        let r = &t.reward;
        match r.kind {
            RewardKind::Analytic => {
                let w = t.analytic_weights();
                if w.len() != t.vocab_size {
                    return bad(format!(
                        "task.reward.weights has {} entries but vocab_size is {}",
                        w.len(),
                        t.vocab_size
                    ));
                }
                if w.iter().any(|x| !x.is_finite()) {
                    return bad("task.reward.weights must be finite".into());
                }
            }
            RewardKind::Learned => {
                if r.samples < 2 || r.embed_dim == 0 || r.hidden_dim == 0 {
                    return bad("learned reward needs samples >= 2 and positive embed_dim, hidden_dim".into());
                }
                if !(r.learning_rate > 0.0) {
                    return bad("task.reward.learning_rate must be > 0".into());
                }
            }
        }
        self.trainer.validate()?;
        if let Some(k) = self.trainer.top_k {
            if k > t.vocab_size {
                return bad(format!("trainer.top_k {k} exceeds vocab_size {}", t.vocab_size));
            }
        }
        Ok(())
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Trainer settings for one method.
    pub fn trainer_for(&self, method: Method) -> TrainerConfig {
        self.trainer.clone().with_method(method)
    }
}

/// Parses and validates a TOML run configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
