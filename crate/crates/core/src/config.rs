//! TOML run configuration covering every module. Unknown keys are errors;
//! anything left out takes its default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::evaluation::ValidationConfig;
use crate::perception::{
    build_dataset, train_regressor, CoeffRegressor, FrameSampling, PerceptionError, RegressorConfig, RegressorReport,
    RegressorTraining,
};
use crate::training::{hex_digest, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Validation protocol; the environment is the training one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub routes: usize,
    pub friction: f64,
    pub alpha: f64,
    pub seed: u64,
    pub steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let v = ValidationConfig::default();
        Self { routes: v.routes, friction: v.friction, alpha: v.alpha, seed: v.seed, steps: v.steps }
    }
}

/// Lane-geometry regressor: its dataset and fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionSection {
    pub sunny: usize,
    pub snowy: usize,
    pub seed: u64,
    pub sampling: FrameSampling,
    pub arch: RegressorConfig,
    pub training: RegressorTraining,
}

impl PerceptionSection {
    /// Renders the dataset on `env` and fits a regressor to it.
    pub fn fit(&self, env: &EnvConfig) -> Result<(CoeffRegressor, RegressorReport), PerceptionError> {
        let data = build_dataset(env, &self.sampling, self.sunny, self.snowy, self.seed)?;
        train_regressor(&data, &self.arch, &self.training)
    }
}

impl Default for PerceptionSection {
    fn default() -> Self {
        Self {
            sunny: 1000,
            snowy: 1000,
            seed: 0,
            sampling: FrameSampling::default(),
            arch: RegressorConfig::default(),
            training: RegressorTraining::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub perception: PerceptionSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Parses `path` and returns the config with the SHA-256 of the file.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let bytes = fs::read(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        let cfg = Self::from_toml(&text)
            .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        Ok((cfg, hex_digest(&bytes)))
    }

    pub fn validation(&self) -> ValidationConfig {
        ValidationConfig {
            routes: self.eval.routes,
            friction: self.eval.friction,
            alpha: self.eval.alpha,
            seed: self.eval.seed,
            steps: self.eval.steps,
            env: self.train.env.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nepisodez = 3\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
        assert!(RunConfig::from_toml("[train.agent]\ngamma = 0.9\n").is_ok());
    }

    #[test]
    fn table_values_are_defaults() {
        let cfg = RunConfig::default();
        let a = &cfg.train.agent;
        assert_eq!((a.gamma, a.alpha, a.actor_lr, a.adversary_lr, a.critic_lr), (0.95, 0.1, 2e-5, 2e-5, 2e-4));
        assert_eq!(cfg.train.buffer_capacity, 800_000);
        assert_eq!((cfg.train.friction, cfg.eval.friction, cfg.eval.routes), (0.6, 0.5, 50));
    }
}
