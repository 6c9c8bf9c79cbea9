//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]`,
//! `[eval]` and `[frontend]` sections, plus `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use acanet::eval::DcfParams;
use acanet::frontend::FbankConfig;
use acanet::model::ModelConfig;
use acanet::training::TrainOptions;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_DIR_ENV: &str = "ACANET_CONFIG_DIR";
pub const DEFAULT_CONFIG_NAME: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub data: DataConfig,
    pub eval: DcfParams,
    pub frontend: FbankConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.frontend.n_filters != self.model.n_filters {
            bail!(
                "frontend.n_filters ({}) must equal model.n_filters ({})",
                self.frontend.n_filters,
                self.model.n_filters
            );
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// The explicit path, else `$ACANET_CONFIG_DIR/config.toml` if it exists.
pub fn resolve_path(explicit: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = explicit {
        return Some(p.to_path_buf());
    }
    let dir = std::env::var_os(CONFIG_DIR_ENV)?;
    let p = Path::new(&dir).join(DEFAULT_CONFIG_NAME);
    p.is_file().then_some(p)
}

pub fn load(explicit: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = match resolve_path(explicit) {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(value).try_into().context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

/// `section.key=value`; the value is read as TOML, falling back to a string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form section.key=value");
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
        bail!("override key {key:?} must name a section and a key");
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p:?} is not a section"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
