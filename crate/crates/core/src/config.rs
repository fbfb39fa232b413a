//! Single JSON document holding every knob of a run.
//!
//! Every key must be present and no unknown key is accepted; either problem
//! is reported as a configuration error listing the valid keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datagen::{ScenarioConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Seeds model initialisation and batch order.
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
}

/// Compares the key sets of `given` against `reference`, recursing into
/// nested objects.
fn check_keys(path: &str, given: &Map<String, Value>, reference: &Map<String, Value>) -> Result<()> {
    let valid: Vec<&str> = reference.keys().map(String::as_str).collect();
    let listing = || valid.join(", ");
    let at = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    if let Some(k) = given.keys().find(|k| !reference.contains_key(*k)) {
        return Err(Error::Config(format!(
            "unknown key `{}`; valid keys: {}",
            at(k),
            listing()
        )));
    }
    if let Some(k) = reference.keys().find(|k| !given.contains_key(*k)) {
        return Err(Error::Config(format!(
            "missing key `{}`; valid keys: {}",
            at(k),
            listing()
        )));
    }
    for (k, rv) in reference {
        if let (Value::Object(r), Some(g)) = (rv, given.get(k)) {
            let Value::Object(g) = g else {
                return Err(Error::Config(format!("`{}` must be an object", at(k))));
            };
            check_keys(&at(k), g, r)?;
        }
    }
    Ok(())
}

impl Config {
    /// Desk-scale preset: smaller model, a faster learning rate and
    /// non-overlapping pre-training windows.
    pub fn desk() -> Self {
        let mut cfg = Config {
            model: ModelConfig::desk(),
            ..Config::default()
        };
        cfg.train.learning_rate = 3e-3;
        cfg.train.stage1_stride = cfg.scenario.horizon;
        cfg
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(given) = &value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let Value::Object(reference) = serde_json::to_value(Config::default())? else {
            unreachable!("config serialises to an object")
        };
        check_keys("", given, &reference)?;
        let cfg: Config = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.split.validate()
    }
}
