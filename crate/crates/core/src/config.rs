//! The run configuration: one JSON file with `sim`, `model`, `train` and
//! `eval` sections. Unknown keys anywhere are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::EvalConfig;
use crate::model::StbConfig;
use crate::sim::SimConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random substream.
    pub seed: u64,
    pub sim: SimConfig,
    pub model: StbConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Section checks plus the values two sections must agree on.
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let agree = [
            ("model.input_dim", self.model.input_dim, "sim.feature_dim", self.sim.feature_dim),
            ("model.frames", self.model.frames, "sim.frames", self.sim.frames),
            (
                "model.train_channels",
                self.model.train_channels,
                "train.finetune.channels",
                self.train.finetune.channels,
            ),
        ];
        for (a, va, b, vb) in agree {
            if va != vb {
                return Err(Error::Config(format!("{a} = {va} but {b} = {vb}")));
            }
        }
        if self.train.finetune.channels > self.sim.channels {
            return Err(Error::Config(format!(
                "train.finetune.channels {} exceeds sim.channels {}",
                self.train.finetune.channels, self.sim.channels
            )));
        }
        if let Some(&k) = self.eval.channel_counts.iter().find(|&&k| k > self.sim.channels) {
            return Err(Error::Config(format!(
                "eval.channel_counts entry {k} exceeds sim.channels {}",
                self.sim.channels
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes the fully resolved config next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}
