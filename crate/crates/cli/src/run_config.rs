//! Run configuration files: either a bare model config or a
//! `{ "model", "train", "data" }` document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wadenet::datapipe::DataConfig;
use wadenet::{Error, ModelConfig, ModelKind, Result, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let run = if value.get("model").is_some() {
            serde_json::from_value(value)?
        } else {
            RunConfig {
                model: serde_json::from_value(value)?,
                train: TrainConfig::default(),
                data: DataConfig::default(),
            }
        };
        run.model.validate()?;
        run.train.validate()?;
        Ok(run)
    }

    /// The config at `path`, or the reference WaDeNet for `classes`
    /// classes when no path is given.
    pub fn load(path: Option<&Path>, classes: Option<usize>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                Self::parse(&text)
            }
            None => Ok(RunConfig {
                model: ModelConfig::reference(ModelKind::Wadenet, classes.unwrap_or(2)),
                train: TrainConfig::default(),
                data: DataConfig::default(),
            }),
        }
    }
}
