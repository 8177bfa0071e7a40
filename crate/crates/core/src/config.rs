//! Run configuration files (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::BenchSchedule;
use crate::model::ModelConfig;
use crate::training::{TaskSpec, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    #[serde(default)]
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub frames: Option<PathBuf>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// Training stages, run in order.
    #[serde(default)]
    pub train: Vec<TrainConfig>,
    #[serde(default)]
    pub paths: RunPaths,
    #[serde(default)]
    pub seed: u64,
    /// System prompt when no task is given.
    #[serde(default)]
    pub system: Vec<u32>,
    #[serde(default)]
    pub bench: Option<BenchSchedule>,
    /// Held-out streams scored after training.
    #[serde(default = "default_eval_streams")]
    pub eval_streams: usize,
    /// Seed of the weight initialisation.
    #[serde(default)]
    pub init_seed: u64,
}

fn default_eval_streams() -> usize {
    200
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies the same checks as the in-memory types.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(task) = &self.task {
            task.validate(&self.model)?;
            if !self.system.is_empty() && self.system != task.system {
                return Err(Error::Config("top-level system differs from task.system".into()));
            }
        }
        let mut last = 0;
        for t in &self.train {
            t.validate()?;
            if t.stage <= last {
                return Err(Error::Config("training stages must be listed once each, in order".into()));
            }
            last = t.stage;
        }
        if !self.train.is_empty() && self.task.is_none() {
            return Err(Error::Config("training needs a task".into()));
        }
        let vocab = self.model.vocab;
        if let Some(bad) = self.system.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Config(format!("system token {bad} outside vocab {vocab}")));
        }
        if let Some(b) = &self.bench {
            if let Some(bad) = b.question.iter().chain(&b.system).find(|&&t| t as usize >= vocab) {
                return Err(Error::Config(format!("bench token {bad} outside vocab {vocab}")));
            }
            if let Some(q) = b.questions.iter().find(|&&q| q > b.frames) {
                return Err(Error::Config(format!("bench question after {q} frames, schedule has {}", b.frames)));
            }
            if !b.questions.is_empty() && b.max_new > 0 && b.question.is_empty() {
                return Err(Error::Config("bench asks need a non-empty question".into()));
            }
        }
        Ok(())
    }

    /// System prompt of every session opened from this config.
    pub fn session_system(&self) -> Vec<u32> {
        match &self.task {
            Some(t) => t.system.clone(),
            None => self.system.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;

    fn base() -> serde_json::Value {
        serde_json::json!({ "model": serde_json::to_value(tiny_config()).unwrap() })
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_json(&base().to_string()).unwrap();
        assert_eq!(cfg.model, tiny_config());
        assert_eq!(cfg.eval_streams, 200);
        assert!(cfg.train.is_empty());
    }

    #[test]
    fn shared_validator_rejects_what_the_types_reject() {
        let mut v = base();
        v["model"]["heads"] = 3.into();
        assert!(tiny_config_with(|c| c.heads = 3).validate().is_err());
        assert!(RunConfig::from_json(&v.to_string()).is_err());

        let mut v = base();
        v["unknown"] = 1.into();
        assert!(RunConfig::from_json(&v.to_string()).is_err());

        let mut v = base();
        v["train"] = serde_json::json!([{ "stage": 1, "learning_rate": 0.1, "steps": 1, "batch_size": 1,
            "trainable": "adapters_backbone", "seed": 0 }]);
        assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));

        let mut v = base();
        v["bench"] = serde_json::json!({ "frames": 2, "questions": [3], "question": [1], "max_new": 1 });
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    fn tiny_config_with(f: impl Fn(&mut ModelConfig)) -> ModelConfig {
        let mut c = tiny_config();
        f(&mut c);
        c
    }
}
