//! Experiment configuration: one TOML file with `data`, `net`,
//! `perceptual`, `loss` and `train` sections, plus dotted overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::DataConfig;
use crate::error::{LfdaError, Result};
use crate::losses::LossWeights;
use crate::model::NetworkConfig;
use crate::perceptual::{PerceptualConfig, PerceptualExtractor};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub net: NetworkConfig,
    pub perceptual: PerceptualConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| LfdaError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LfdaError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| LfdaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LfdaError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        let stages = self.perceptual.channels.len();
        if self.perceptual.weights.is_none() && stages != self.perceptual.strides.len() {
            return Err(LfdaError::Config("perceptual.channels and perceptual.strides differ in length".into()));
        }
        self.loss.validate(stages)?;
        let reduction: usize = self.perceptual.strides.iter().product();
        let stride = self.net.feature_stride().max(reduction);
        if !self.data.height.is_multiple_of(stride) || !self.data.width.is_multiple_of(stride) {
            return Err(LfdaError::Config(format!(
                "image size {}x{} is not divisible by {stride}",
                self.data.height, self.data.width
            )));
        }
        Ok(())
    }

    pub fn extractor(&self) -> Result<PerceptualExtractor> {
        PerceptualExtractor::from_config(&self.perceptual)
    }

    /// Apply `section.key=value`. The value is read as a TOML literal, or as
    /// a bare string when it does not parse. Types are checked here; the
    /// cross-field checks of `validate` are left to the caller so that
    /// dependent fields can be changed one at a time.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| LfdaError::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Table::try_from(&*self).map_err(|e| LfdaError::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(LfdaError::Config(format!("malformed key `{key}`")));
        }
        let (last, path) = parts.split_last().expect("non-empty");
        let mut table = &mut root;
        for part in path {
            table = match table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
                toml::Value::Table(t) => t,
                _ => return Err(LfdaError::Config(format!("`{part}` in `{key}` is not a section"))),
            };
        }
        table.insert(last.to_string(), value);
        let updated: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| LfdaError::Config(format!("--set {key}: {}", e.message())))?;
        *self = updated;
        Ok(())
    }

    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        for o in overrides {
            self.apply_override(o)?;
        }
        self.validate()?;
        Ok(self)
    }
}
