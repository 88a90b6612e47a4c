//! Run configuration: one TOML document with a section per pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::degrade::DegradeParams;
use crate::detector::Arch;
use crate::evaluator::EvalConfig;
use crate::synthdata::SceneConfig;
use crate::trainer::TrainConfig;

pub const ECHO_FILE: &str = "config.echo";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {detail}")]
    Parse { origin: String, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { n_train: 400, n_test: 100 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub gen: GenConfig,
    pub model: Arch,
    pub train: TrainConfig,
    pub degrade: DegradeParams,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// The effective configuration as TOML; parses back to `self`.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("validated config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.scene.validate().map_err(|e| bad(&e))?;
        self.model.validate().map_err(|e| bad(&e))?;
        self.train.validate().map_err(|e| bad(&e))?;
        self.degrade.validate().map_err(|e| bad(&e))?;
        let classes = self.scene.class_names().len();
        if self.model.num_classes != classes {
            return Err(ConfigError::Invalid(format!(
                "model.num_classes = {} but the scene profile has {classes} classes",
                self.model.num_classes
            )));
        }
        for (name, seed) in [("scene.seed", self.scene.seed), ("train.seed", self.train.seed), ("eval.seed", self.eval.seed)] {
            if seed > i64::MAX as u64 {
                return Err(ConfigError::Invalid(format!("{name} exceeds {}", i64::MAX)));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(ConfigError::Invalid("eval.batch_size must be positive".into()));
        }
        if !(self.eval.mr_floor > 0.0 && self.eval.mr_floor < 1.0) {
            return Err(ConfigError::Invalid("eval.mr_floor must lie in (0, 1)".into()));
        }
        crate::degrade::parse_conditions(&self.eval.conditions).map_err(|e| bad(&e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.echo(), "echo").unwrap(), c);
    }

    #[test]
    fn modified_config_round_trips() {
        let mut c = RunConfig::default();
        c.train.lr = 0.1 + 0.2;
        c.train.aux = false;
        c.model.interaction = false;
        c.degrade.sigma2 = 2601.0;
        c.eval.conditions = vec!["region:tir:0.5:3".into()];
        c.scene.seed = 123456789;
        let back = RunConfig::from_toml(&c.echo(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.echo(), c.echo());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("[train]\nepochs = 3\n", "inline").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.scene, SceneConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[train]\nepoch = 3\n", "[trian]\n", "seed = 1\n", "[train.weights]\nconsistency = 1.0\n"] {
            assert!(RunConfig::from_toml(text, "inline").is_err(), "{text}");
        }
    }

    #[test]
    fn class_count_must_agree() {
        let mut c = RunConfig::default();
        c.model.num_classes = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn bad_condition_is_rejected() {
        let mut c = RunConfig::default();
        c.eval.conditions = vec!["drop:depth".into()];
        assert!(c.validate().unwrap_err().to_string().contains("depth"));
    }
}
