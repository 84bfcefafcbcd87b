//! Experiment configuration files and command-line overrides.
//!
//! A configuration file is a [`TrainConfig`] written as TOML (`.toml`) or
//! JSON (anything else). Omitted fields keep their desk-scale defaults.
//! Overrides use dotted paths into the same structure, for example
//! `sac.policy_lr=1e-3` or `eval_adapt.adaptation_steps=1`.

use std::fs;
use std::path::Path;

use flap_core::meta::TrainConfig;
use serde_json::Value;

use crate::error::{FlapError, Result};

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| FlapError::io(path, e))?;
    let value: Value = if path.extension().and_then(|e| e.to_str()) == Some("toml") {
        toml::from_str(&text).map_err(|e| FlapError::Toml {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
    } else {
        serde_json::from_str(&text).map_err(|e| FlapError::json(path, e))?
    };
    let mut base = serde_json::to_value(TrainConfig::desk()).expect("config serializes");
    merge(&mut base, value);
    serde_json::from_value(base).map_err(|e| FlapError::json(path, e))
}

pub fn save_config(config: &TrainConfig, path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("toml") {
        let text = toml::to_string_pretty(config).map_err(|e| FlapError::Toml {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(|e| FlapError::io(path, e))
    } else {
        crate::files::write_json(path, config)
    }
}

/// Recursive object merge: values in `patch` replace those in `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `path.to.field=value` overrides. Values are read as JSON when
/// they parse (numbers, booleans, arrays, quoted strings) and as bare
/// strings otherwise, so `family=direction` works without quotes.
pub fn apply_overrides(config: &TrainConfig, overrides: &[String]) -> Result<TrainConfig> {
    let mut root = serde_json::to_value(config).expect("config serializes");
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| FlapError::Override(item.clone(), "expected key=value".into()))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| {
                    FlapError::Override(item.clone(), format!("unknown field `{part}`"))
                })?;
        }
        *slot = value;
    }
    serde_json::from_value(root)
        .map_err(|e| FlapError::Override(overrides.join(" "), e.to_string()))
}
