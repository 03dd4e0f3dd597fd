//! Experiment configuration: a TOML file layered over defaults, with
//! `section.key=value` overrides on top.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::scene::SceneConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 200,
            test_scenes: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    /// Corruption spec strings evaluated by default.
    pub scenarios: Vec<String>,
}

impl ExperimentConfig {
    /// Defaults, then `path` if given, then each `key=value` override.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|e| config_err!("cannot read config {}: {e}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| config_err!("{}: {e}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.scene.num_classes != self.model.decoder.num_classes {
            return Err(config_err!(
                "scene.num_classes ({}) must equal model.decoder.num_classes ({})",
                self.scene.num_classes,
                self.model.decoder.num_classes
            ));
        }
        let most = self.scene.box_count.unwrap_or(self.scene.max_boxes);
        if most > self.model.decoder.num_queries {
            return Err(config_err!(
                "scenes may hold {most} boxes but the decoder has only {} queries",
                self.model.decoder.num_queries
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }
}

/// Set `a.b.c=value`, creating intermediate tables. The value is read as a
/// TOML literal when possible and as a bare string otherwise.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err!("override {assignment:?} is not key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err!("override {assignment:?} has an empty key"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err!("override {assignment:?}: {k} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
