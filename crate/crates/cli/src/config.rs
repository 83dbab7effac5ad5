use std::path::Path;

use inade::data::ShapesConfig;
use inade::engine::TrainConfig;
use inade::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Any of "overall", "instance", "class", "fid".
    pub metrics: Vec<String>,
    pub groups: usize,
    pub pairs: usize,
    pub resamples: usize,
    pub num_images: usize,
    pub seed: u64,
}

pub const METRICS: [&str; 4] = ["overall", "instance", "class", "fid"];

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metrics: METRICS.iter().map(|s| s.to_string()).collect(),
            groups: 3,
            pairs: 3,
            resamples: 3,
            num_images: 20,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
            return Err(Error::config(format!("unknown metric {m:?}; expected one of {METRICS:?}")));
        }
        if self.groups < 2 || self.resamples < 2 || self.num_images == 0 {
            return Err(Error::config("need groups ≥ 2, resamples ≥ 2 and num_images ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleOptions {
    /// Total steps; 0 means `epochs × steps per epoch`.
    pub steps: u64,
    pub checkpoint_every: u64,
    pub sample_every: u64,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        Self {
            steps: 0,
            checkpoint_every: 500,
            sample_every: 500,
        }
    }
}

/// Everything a run needs, read from TOML (or JSON for `.json` files).
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: ShapesConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleOptions,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let cfg: RunConfig = if json {
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?
        };
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let m = &self.train.model;
        if (m.height, m.width, m.num_classes) != (self.dataset.height, self.dataset.width, self.dataset.num_classes) {
            return Err(Error::config("dataset size/classes disagree with the model config"));
        }
        Ok(())
    }
}
