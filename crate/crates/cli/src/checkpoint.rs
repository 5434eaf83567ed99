//! Checkpoints: a JSON manifest with the run config, network specs, named
//! parameter arrays, optimizer moments and the data generator position.

use crate::config::RunConfig;
use crate::io::{read_to_string, write_atomic};
use crate::{CliError, Result};
use cafm::models::MlpSpec;
use cafm::oracle::Dataset;
use cafm::rng::RngState;
use cafm::trainer::{AdamState, Counters, Objective, TrainConfig, TrainState};
use cafm::Parameters;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Fm,
    Cafm,
    Afm,
    /// Wraps the analytic velocity of the run's dataset; holds no networks.
    Oracle,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Fm => "fm",
            CheckpointKind::Cafm => "cafm",
            CheckpointKind::Afm => "afm",
            CheckpointKind::Oracle => "oracle",
        }
    }
}

impl From<Objective> for CheckpointKind {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Fm => CheckpointKind::Fm,
            Objective::Cafm => CheckpointKind::Cafm,
            Objective::Afm => CheckpointKind::Afm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub objective: CheckpointKind,
    /// Optimizer updates completed.
    pub step: usize,
    pub config: RunConfig,
    /// SHA-256 of the compact JSON of `config`.
    pub config_sha256: String,
    pub g_spec: Option<MlpSpec>,
    pub g: Option<Parameters>,
    pub d_spec: Option<MlpSpec>,
    pub d: Option<Parameters>,
    /// EMA shadow of the generator; this is what sampling and evaluation use.
    pub ema: Option<Parameters>,
    pub adam_g: Option<AdamState>,
    pub adam_d: Option<AdamState>,
    pub counters: Counters,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn from_state(config: &RunConfig, g_spec: &MlpSpec, d_spec: Option<&MlpSpec>, state: &TrainState) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            objective: config.train.objective.into(),
            step: state.step,
            config: config.clone(),
            config_sha256: config.hash(),
            g_spec: Some(g_spec.clone()),
            g: Some(state.g.clone()),
            d_spec: d_spec.cloned(),
            d: state.d.clone(),
            ema: Some(state.ema.shadow.clone()),
            adam_g: Some(state.adam_g.clone()),
            adam_d: state.adam_d.clone(),
            counters: state.counters,
            rng: Some(state.rng.clone()),
        }
    }

    /// A pseudo-checkpoint whose "model" is the exact marginal velocity of
    /// `preset`.
    pub fn oracle(preset: &str) -> Result<Self> {
        Dataset::preset(preset).map_err(CliError::lib)?;
        let config = RunConfig::new(TrainConfig::new(Objective::Fm, preset, 1));
        Ok(Self {
            version: CHECKPOINT_VERSION,
            objective: CheckpointKind::Oracle,
            step: 0,
            config_sha256: config.hash(),
            config,
            g_spec: None,
            g: None,
            d_spec: None,
            d: None,
            ema: None,
            adam_g: None,
            adam_d: None,
            counters: Counters::default(),
            rng: None,
        })
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let ck: Checkpoint = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Checkpoint(format!("at `{}`: {}", e.path(), e.inner())))?;
        ck.verify()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?).map_err(|e| match e {
            CliError::Checkpoint(m) => CliError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks the version, the config hash, and that every stored parameter
    /// set has the layout its spec implies.
    pub fn verify(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Checkpoint(m));
        if self.version != CHECKPOINT_VERSION {
            return bad(format!("unsupported version {} (expected {CHECKPOINT_VERSION})", self.version));
        }
        let hash = self.config.hash();
        if hash != self.config_sha256 {
            return bad(format!("config hash {hash} does not match the recorded {}", self.config_sha256));
        }
        if self.objective == CheckpointKind::Oracle {
            if self.g.is_some() || self.d.is_some() || self.ema.is_some() {
                return bad("an oracle checkpoint holds no parameters".into());
            }
            return Ok(());
        }
        if self.objective != self.config.train.objective.into() {
            return bad(format!(
                "objective {} differs from the config's {:?}",
                self.objective.as_str(),
                self.config.train.objective
            ));
        }
        let Some(g_spec) = &self.g_spec else {
            return bad("missing g_spec".into());
        };
        let g_layout = g_spec.init(0).map_err(|e| CliError::Checkpoint(format!("g_spec: {e}")))?;
        check_layout("g", &g_layout, self.g.as_ref())?;
        check_layout("ema", &g_layout, self.ema.as_ref())?;
        if let Some(adam) = &self.adam_g {
            check_layout("adam_g.m", &g_layout, Some(&adam.m))?;
            check_layout("adam_g.v", &g_layout, Some(&adam.v))?;
        }
        match (&self.d_spec, &self.d) {
            (None, None) => {}
            (Some(spec), d) => {
                let d_layout = spec.init(0).map_err(|e| CliError::Checkpoint(format!("d_spec: {e}")))?;
                check_layout("d", &d_layout, d.as_ref())?;
                if let Some(adam) = &self.adam_d {
                    check_layout("adam_d.m", &d_layout, Some(&adam.m))?;
                    check_layout("adam_d.v", &d_layout, Some(&adam.v))?;
                }
            }
            (None, Some(_)) => return bad("discriminator parameters without d_spec".into()),
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::preset(&self.config.train.dataset).map_err(CliError::lib)
    }

    /// Spec and EMA parameters of the generator, for networks.
    pub fn generator(&self) -> Option<(&MlpSpec, &Parameters)> {
        Some((self.g_spec.as_ref()?, self.ema.as_ref()?))
    }

    /// Data dimension of the model.
    pub fn dim(&self) -> Result<usize> {
        match &self.g_spec {
            Some(s) => Ok(s.in_dim),
            None => Ok(self.dataset()?.dim()),
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.g_spec.as_ref().is_some_and(|s| s.num_classes.is_some())
    }
}

fn check_layout(what: &str, expected: &Parameters, got: Option<&Parameters>) -> Result<()> {
    let Some(got) = got else {
        return Err(CliError::Checkpoint(format!("missing {what}")));
    };
    match expected.first_layout_mismatch(got) {
        Some(name) => Err(CliError::Checkpoint(format!("{what}: parameter {name} does not match the network layout"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cafm::trainer::{train, Reporting, Silent};

    fn trained() -> Checkpoint {
        let mut t = TrainConfig::new(Objective::Cafm, "gm1d2", 12);
        t.batch = 16;
        t.n = 3;
        t.d_warmup_steps = 2;
        t.model.g_hidden = vec![8, 8];
        t.model.d_hidden = vec![8];
        t.model.time_embed_dim = 4;
        let config = RunConfig::new(t);
        let out = train(&config.train, None, &Reporting::default(), &mut Silent).unwrap();
        Checkpoint::from_state(&config, &out.g_spec, out.d_spec.as_ref(), &out.state)
    }

    #[test]
    fn reload_then_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = trained();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back, ck);
        back.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(back.counters.g_updates + back.counters.d_updates + back.counters.warmup_d, 12);

        let oracle = Checkpoint::oracle("ring8").unwrap();
        let o = dir.path().join("o.json");
        oracle.save(&o).unwrap();
        assert_eq!(Checkpoint::load(&o).unwrap().to_json(), oracle.to_json());
    }

    #[test]
    fn tampered_config_fails_the_hash_check() {
        let ck = trained();
        let mut text = ck.to_json();
        text = text.replacen("\"seed\": 0", "\"seed\": 1", 1);
        let err = Checkpoint::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("hash"), "{err}");
    }

    #[test]
    fn wrong_layout_names_the_parameter() {
        let mut ck = trained();
        let ema = ck.ema.as_mut().unwrap();
        *ema.get_mut("layer1.bias").unwrap() = cafm::Tensor::zeros(1, 3);
        let err = Checkpoint::from_json(&ck.to_json()).unwrap_err().to_string();
        assert!(err.contains("ema") && err.contains("layer1.bias"), "{err}");

        let mut ck = trained();
        ck.version = 7;
        assert!(Checkpoint::from_json(&ck.to_json()).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::oracle("moons").is_err());
    }
}
