//! Experiment configuration: one JSON document holding every sub-config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::fusion::ArchConfig;
use crate::sim::SimConfig;
use crate::training::TrainConfig;

pub const PRESETS: [&str; 5] = ["default", "overfit-smoke", "smoke", "ablation", "noise-sweep"];

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub codec: CodecConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Field-level checks followed by cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.codec.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.arch.validate_against(&self.codec)?;
        if self.arch.c_radar_in != self.sim.features.radar_channels {
            return Err(Error::config(
                "arch.c_radar_in",
                format!("is {} but sim.features.radar_channels is {}", self.arch.c_radar_in, self.sim.features.radar_channels),
            ));
        }
        if self.arch.c_image_in != self.sim.features.image_channels {
            return Err(Error::config(
                "arch.c_image_in",
                format!("is {} but sim.features.image_channels is {}", self.arch.c_image_in, self.sim.features.image_channels),
            ));
        }
        Ok(())
    }

    /// Parses and validates. Missing or unknown fields are reported by name.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Pretty JSON in declaration order; stable across runs.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::default();
        match name {
            "default" | "ablation" => {}
            "overfit-smoke" => {
                let s = &mut cfg.sim;
                s.sigma_r = 0.0;
                s.sigma_a = 0.0;
                s.sigma_d = 0.0;
                s.n_clutter = 0;
                s.hard_fraction = 0.0;
                s.features.perturbation = 0.0;
                s.jitter.sigma_px = 0.0;
                s.jitter.p_miss = 0.0;
                cfg.train.train_frames = 8;
                cfg.train.val_frames = 0;
                cfg.train.test_frames = 8;
                cfg.train.epochs = 200;
            }
            "smoke" => {
                cfg.train.train_frames = 16;
                cfg.train.val_frames = 8;
                cfg.train.test_frames = 8;
                cfg.train.epochs = 5;
            }
            "noise-sweep" => {
                cfg.sim.hard_fraction = 0.5;
                cfg.sim.hard_factor = 4.0;
                cfg.train.train_frames = 256;
                cfg.train.epochs = 30;
            }
            other => {
                return Err(Error::config("preset", format!("unknown preset `{other}`, expected one of {}", PRESETS.join(", "))));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let json = cfg.to_canonical_json();
            assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg, "{name}");
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn missing_field_is_named() {
        let mut v: serde_json::Value = serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["train"].as_object_mut().unwrap().remove("epochs");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("epochs"), "{err}");
    }

    #[test]
    fn cross_field_mismatch_is_named() {
        let mut cfg = ExperimentConfig::default();
        cfg.arch.cls_out = 15;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("cls_out"), "{err}");
        let mut cfg = ExperimentConfig::default();
        cfg.arch.c_image_in = 16;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("c_image_in"), "{err}");
    }
}
