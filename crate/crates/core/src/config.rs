//! Run configuration: a strict TOML document where unknown keys are errors.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::generate::GenCaps;
use crate::model::{GrounderConfig, ModelConfig};
use crate::optim::OptimConfig;
use crate::reward::RewardConfig;
use crate::sglp::SglpConfig;
use crate::stage1::PretrainConfig;
use crate::stage2::SftConfig;
use crate::stage3::RlConfig;
use crate::TrainError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Checkpoint of the previous stage.
    pub init_checkpoint: Option<PathBuf>,
    /// Held-out tasks for evaluation during training.
    pub dev_data: Option<PathBuf>,
    pub model: ModelConfig,
    pub grounder: GrounderConfig,
    pub optim: OptimConfig,
    pub caps: GenCaps,
    pub stage1: PretrainConfig,
    pub stage2: SftConfig,
    pub stage3: RlConfig,
    pub sglp: SglpConfig,
    pub reward: RewardConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.grounder.validate(self.model.d)?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.stage3.validate()?;
        self.sglp.validate()?;
        self.reward.validate().map_err(TrainError::Config)?;
        if self.caps.max_steps == 0 || self.caps.max_tokens < 2 {
            return Err(TrainError::Config(format!("caps too small: {:?}", self.caps)));
        }
        if !(self.optim.warmup_frac >= 0.0 && self.optim.warmup_frac < 1.0) {
            return Err(TrainError::Config(format!("warmup_frac must be in [0, 1): {}", self.optim.warmup_frac)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.d, 64);
        assert_eq!(c.grounder.latents, 32);
        assert_eq!(c.stage1.tau, 0.07);
        assert_eq!(c.reward.beta, 0.1);
        assert_eq!(c.stage3.group_size, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seeed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nwidth = 3").is_err());
        assert!(RunConfig::from_toml("[stage9]\nx = 1").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nd = 30\nheads = 4").is_err());
        assert!(RunConfig::from_toml("[sglp]\nsigma = 0.0").is_err());
        assert!(RunConfig::from_toml("[stage1]\ntau = -1.0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.model.layers = 2;
        c.init_checkpoint = Some("runs/s1/model.ckpt".into());
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }
}
