//! Layered run configuration: TOML file, then `--set key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::PreprocessConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{build_ablation, TrainConfig, Variant};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Configuration plus the raw table it came from, so callers can tell an
/// explicit setting from a default.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: AppConfig,
    table: toml::Table,
}

impl Resolved {
    pub fn is_set(&self, dotted: &str) -> bool {
        let mut cur = &self.table;
        let parts: Vec<&str> = dotted.split('.').collect();
        for (i, p) in parts.iter().enumerate() {
            match cur.get(*p) {
                Some(toml::Value::Table(t)) if i + 1 < parts.len() => cur = t,
                Some(_) if i + 1 == parts.len() => return true,
                _ => return false,
            }
        }
        false
    }

    /// Applies `--seed` to every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.config.preprocess.seed = seed;
        self.config.train.seed = seed;
    }

    /// Model and training settings for `variant`. The variant's epoch count
    /// applies unless `train.epochs` was given explicitly.
    pub fn for_variant(&self, variant: Option<Variant>) -> (ModelConfig, TrainConfig) {
        let mut train = self.config.train.clone();
        let Some(variant) = variant else {
            return (self.config.model.clone(), train);
        };
        if !self.is_set("train.epochs") {
            train.epochs = variant.default_epochs();
        }
        (build_ablation(&self.config.model, variant), train)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Resolved> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| crate::io::not_found_or_io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let config: AppConfig = serde_path_to_error::deserialize(toml::Value::Table(table.clone()))
        .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
    config.train.validate()?;
    Ok(Resolved { config, table })
}
