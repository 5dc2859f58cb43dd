//! Loading a training config from JSON plus command-line overrides.

use anyhow::{Context, Result};
use gazeprompt::harness::{SeedConfig, TrainConfig};
use serde_json::Value;
use std::path::Path;

/// Environment variable that replaces every seed of the config.
pub const SEED_ENV: &str = "GAZEPROMPT_SEED";

pub struct LoadedConfig {
    pub config: TrainConfig,
    /// Seed taken from [`SEED_ENV`], if set.
    pub env_seed: Option<u64>,
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            let seed = s.trim().parse().map_err(|_| gazeprompt::Error::Config {
                key: SEED_ENV.into(),
                message: format!("expected an unsigned integer, got `{s}`"),
            })?;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Sets `path` (dot-separated) inside `doc` to `value`, creating objects
/// along the way.
fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(gazeprompt::Error::Config {
                key: path.into(),
                message: "empty key in override path".into(),
            }
            .into());
        }
        let obj = match node {
            Value::Object(map) => map,
            other => {
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("just created")
            }
        };
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj.entry(*key).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Parses `key=value`; the value is read as JSON and falls back to a string.
fn parse_override(item: &str) -> Result<(String, Value)> {
    let (key, raw) = item.split_once('=').ok_or_else(|| gazeprompt::Error::Config {
        key: item.into(),
        message: "override must look like key=value".into(),
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// Reads the config (or defaults), applies `--set` overrides, then the
/// seed environment variable.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<LoadedConfig> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| gazeprompt::Error::Config {
                key: ".".into(),
                message: format!("{}: {e}", p.display()),
            })?
        }
        None => Value::Object(Default::default()),
    };
    for item in overrides {
        let (key, value) = parse_override(item)?;
        set_path(&mut doc, &key, value)?;
    }
    let mut config = TrainConfig::from_json(&doc.to_string())?;
    let env_seed = env_seed()?;
    if let Some(seed) = env_seed {
        config.seeds = SeedConfig::all(seed);
    }
    Ok(LoadedConfig { config, env_seed })
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
