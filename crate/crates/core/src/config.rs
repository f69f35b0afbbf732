//! Run configuration files and content hashes.
//!
//! A run is described by one TOML file. Any key can be overridden from the
//! command line with `section.key=value`, where the value is TOML syntax
//! (`wscda.loss.alpha=-2`, `data.n_gt=10`, `model.use_dan=false`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::pplo::PploConfig;
use crate::wscda::WscdaConfig;

/// SHA-256 of the canonical JSON form of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Annotation files feeding a run. Relative paths resolve against the
/// directory of the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub human: Option<PathBuf>,
    pub animal: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    /// Held-out target set with ground truth.
    pub eval: Option<PathBuf>,
    /// Labeled target pool that supervised boosting draws from.
    pub target_labeled: Option<PathBuf>,
    /// Labeled target instances added by supervised boosting.
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub wscda: WscdaConfig,
    pub pplo: PploConfig,
    /// PCK bound as a fraction of the longer bounding-box side.
    pub pck_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".into(),
            seed: 0,
            data: DataPaths::default(),
            model: ModelConfig::default(),
            wscda: WscdaConfig::default(),
            pplo: PploConfig::default(),
            pck_fraction: 0.2,
        }
    }
}

fn toml_err(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{what}: {e}"))
}

/// Sets `dotted.key` in a TOML table to the parsed `value`.
fn set_key(root: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        // bare words are taken as strings
        Err(_) => toml::Value::String(value.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and applies `key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| toml_err("config", e))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_key(&mut table, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e| toml_err("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applies overrides and resolves data paths.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_with(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.human, &mut d.animal, &mut d.unlabeled, &mut d.eval, &mut d.target_labeled]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| toml_err("serialising config", e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("run name {:?} must be a plain, non-empty name", self.name)));
        }
        if !(self.pck_fraction > 0.0) {
            return Err(Error::Config(format!("pck_fraction must be positive, got {}", self.pck_fraction)));
        }
        self.model.validate()?;
        self.wscda.validate()?;
        self.pplo.validate()
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_with(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::from_toml_with(
            "name = \"a\"\n[wscda.loss]\nalpha = -1.0\n",
            &[
                "wscda.loss.alpha=-2.5".into(),
                "data.n_gt=10".into(),
                "model.use_dan=false".into(),
                "name=b".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.wscda.loss.alpha, -2.5);
        assert_eq!(c.data.n_gt, 10);
        assert!(!c.model.use_dan);
        assert_eq!(c.name, "b");
    }

    #[test]
    fn bad_input_is_a_config_error() {
        assert!(matches!(RunConfig::from_toml_with("nmae = 1", &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_with("[wscda.loss]\nalpha = 1.0", &[]), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_with("", &["noequals".into()]).is_err());
        assert!(RunConfig::from_toml_with("name = 3", &[]).is_err());
    }
}
