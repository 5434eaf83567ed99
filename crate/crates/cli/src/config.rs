//! Run configuration: a training config plus sampling, evaluation, logging
//! and output settings.

use crate::CliError;
use cafm::models::MlpSpec;
use cafm::oracle::Dataset;
use cafm::samplers::{SamplerConfig, SamplerKind};
use cafm::trainer::{EvalSettings, Reporting, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Default sampler for the `sample` command.
    #[serde(default = "default_sampler")]
    pub sampler: SamplerConfig,
    /// Evaluation cadence and settings for the metrics log.
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default = "one")]
    pub log_every: usize,
    /// Updates between intermediate checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Checkpoint to post-train from.
    #[serde(default)]
    pub init: Option<PathBuf>,
}

fn default_sampler() -> SamplerConfig {
    SamplerConfig::new(SamplerKind::Euler, 128)
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            sampler: default_sampler(),
            eval: EvalSettings::default(),
            log_every: 1,
            checkpoint_every: 0,
            out_dir: default_out(),
            init: None,
        }
    }

    /// Parses JSON, reporting the path of the offending field on failure.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::Config {
            path: "train".into(),
            message: e.to_string(),
        })?;
        self.sampler.validate().map_err(|e| CliError::Config {
            path: "sampler".into(),
            message: e.to_string(),
        })?;
        self.eval.sampler.validate().map_err(|e| CliError::Config {
            path: "eval.sampler".into(),
            message: e.to_string(),
        })?;
        if self.log_every == 0 {
            return Err(CliError::Config {
                path: "log_every".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    /// The generator spec this config trains.
    pub fn model_spec(&self, dataset: &Dataset) -> MlpSpec {
        self.train.model.generator_spec(dataset, self.train.objective)
    }

    pub fn reporting(&self) -> Reporting {
        Reporting {
            log_every: self.log_every,
            eval: Some(self.eval.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cafm::trainer::Objective;

    #[test]
    fn round_trips_losslessly() {
        let mut train = TrainConfig::posttrain("ring8", 1234);
        train.g_lr = 0.1 + 0.2;
        train.schedules.lambda_ot = vec![(10, 1.0 / 3.0)];
        let mut c = RunConfig::new(train);
        c.init = Some("fm/checkpoint.json".into());
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"objective": "cafm", "dataset": "ring8", "total_steps": 10}}"#).unwrap();
        assert_eq!(c.train.n, 16);
        assert_eq!(c.train.ema_decay, 0.99);
        assert_eq!(c.train.adam_beta, [0.0, 0.95]);
        assert_eq!(c.train.weights.lambda_ot, 0.0);
        assert_eq!(c.train.objective, Objective::Cafm);
    }

    #[test]
    fn missing_dataset_names_the_field() {
        let err = RunConfig::from_json(r#"{"train": {"objective": "fm", "total_steps": 10}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dataset"), "{msg}");
        assert!(msg.contains("train"), "{msg}");
    }

    #[test]
    fn unknown_and_invalid_fields_are_rejected() {
        let err = RunConfig::from_json(r#"{"train": {"objective": "fm", "dataset": "ring8", "total_steps": 1, "lr": 1}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("lr"));
        let err = RunConfig::from_json(r#"{"train": {"objective": "fm", "dataset": "ring8", "total_steps": 1, "batch": -3}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("train.batch"), "{err}");
        let err = RunConfig::from_json(r#"{"train": {"objective": "fm", "dataset": "moons", "total_steps": 1}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("moons"), "{err}");
    }
}
