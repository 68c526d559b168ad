//! JSON run configuration: `{"model": {...}, "train": {...}, "data": {...}}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::read_bytes;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::{TaskKind, TaskSpec};
use crate::train::TrainConfig;

/// Where training and evaluation tokens come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    /// Sizes of a generated character corpus.
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_heldout")]
    pub n_heldout: usize,
    /// Corpus files for text training and perplexity.
    #[serde(default)]
    pub train_path: Option<String>,
    #[serde(default)]
    pub heldout_path: Option<String>,
    /// Shortest task sequence drawn during training.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    /// Train on every next token of task sequences, not only the answers.
    #[serde(default)]
    pub dense: bool,
    #[serde(default)]
    pub eval_lengths: Vec<usize>,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default = "default_key_len")]
    pub key_len: usize,
}

fn default_task() -> TaskKind {
    TaskKind::CharLm
}
fn default_n_train() -> usize {
    200_000
}
fn default_n_heldout() -> usize {
    20_000
}
fn default_min_len() -> usize {
    1
}
fn default_n_eval() -> usize {
    100
}
fn default_key_len() -> usize {
    4
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl DataConfig {
    /// The task spec for training at `seq_len`.
    pub fn task_spec(&self, seq_len: usize) -> TaskSpec {
        let mut spec = TaskSpec::new(self.task, seq_len, seq_len, self.seed);
        if !self.eval_lengths.is_empty() {
            spec.eval_lengths = self.eval_lengths.clone();
            spec.seq_len_eval = *self.eval_lengths.iter().max().expect("non-empty");
        }
        spec.n_eval = self.n_eval;
        spec.key_len = self.key_len;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.task == TaskKind::Passkey && !(1..=10).contains(&self.key_len) {
            return Err(Error::config("key_len", "must lie in 1..=10"));
        }
        if self.eval_lengths.contains(&0) {
            return Err(Error::config("eval_lengths", "lengths must be positive"));
        }
        if self.min_len == 0 {
            return Err(Error::config("min_len", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Needed only when a model is built from scratch.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.train.validate()?;
        self.data.validate()
    }

    pub fn require_model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::config("model", "required to build a model from scratch"))
    }

    /// The resolved config with every default filled in.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Parses and validates a config; unknown keys are rejected by name.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field"))
            .unwrap_or("<document>")
            .to_string();
        Error::Config { field, msg }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::config("<document>", "config is not UTF-8"))?;
    parse_config(&text)
}
