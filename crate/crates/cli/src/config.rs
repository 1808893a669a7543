//! TOML config file with flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flashvtg_core::data::SyntheticConfig;
use flashvtg_core::trainer::TrainConfig;
use serde::Deserialize;

/// Top-level config file. Every section is optional; unknown keys anywhere
/// are errors.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    /// Training preset the `[train]` table is layered on.
    pub preset: Option<String>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Seeds of the ablation table.
    pub seeds: Option<Vec<u64>>,
    pub train: Option<toml::Table>,
    pub synth: Option<toml::Table>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Preset (flag beats file, default `tiny`) overlaid with `[train]`.
    pub fn train_config(&self, preset_flag: Option<&str>) -> Result<TrainConfig> {
        let name = preset_flag.or(self.preset.as_deref()).unwrap_or("tiny");
        let Some(base) = TrainConfig::preset(name) else {
            bail!("unknown preset {name:?} (expected \"tiny\" or \"default\")");
        };
        overlay(base, self.train.as_ref()).context("in [train]")
    }

    pub fn synth_config(&self) -> Result<SyntheticConfig> {
        overlay(SyntheticConfig::default(), self.synth.as_ref()).context("in [synth]")
    }
}

/// Serializes `base`, merges `table` into it key by key and deserializes
/// the result, so the config types' unknown-key checks still apply.
fn overlay<T>(base: T, table: Option<&toml::Table>) -> Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let Some(table) = table else {
        return Ok(base);
    };
    let mut merged = toml::Table::try_from(&base)?;
    merge(&mut merged, table);
    Ok(toml::Value::Table(merged).try_into()?)
}

fn merge(into: &mut toml::Table, from: &toml::Table) {
    for (k, v) in from {
        match (into.get_mut(k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ConfigFile> {
        Ok(toml::from_str(text)?)
    }

    #[test]
    fn train_table_overlays_the_preset() {
        let f = parse("[train]\nlr = 0.01\n[train.weights]\ncas = 0.5\n").unwrap();
        let cfg = f.train_config(None).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.weights.cas, 0.5);
        assert_eq!(cfg.d_model, TrainConfig::tiny().d_model);
        assert_eq!(cfg.weights.reg, TrainConfig::tiny().weights.reg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(parse("lerning_rate = 1").is_err());
        let f = parse("[train]\nlerning_rate = 1\n").unwrap();
        assert!(f.train_config(None).is_err());
        let f = parse("[synth]\nsignal = 1\n").unwrap();
        assert!(f.synth_config().is_err());
    }

    #[test]
    fn preset_flag_wins_over_file() {
        let f = parse("preset = \"default\"").unwrap();
        assert_eq!(f.train_config(None).unwrap().d_model, 256);
        assert_eq!(f.train_config(Some("tiny")).unwrap().d_model, 64);
        assert!(f.train_config(Some("huge")).is_err());
    }
}
