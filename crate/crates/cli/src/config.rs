//! Flat key-value configuration files and `--set` overrides.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde_json::{Map, Value};

use msad_core::data::SyntheticSpec;
use msad_core::evaluation::ExperimentConfig;

use crate::exit::{config_error, io_error};

pub type Flat = Map<String, Value>;

/// Reads a flat JSON object. Nested objects are rejected so that every key
/// has exactly one meaning.
pub fn read_flat(path: &Path) -> anyhow::Result<Flat> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(config_error(format!(
            "{}: expected a JSON object",
            path.display()
        ))),
    }
}

/// Parses `key=value` pairs; values are JSON where they parse as JSON and
/// plain strings otherwise.
pub fn parse_sets(sets: &[String]) -> anyhow::Result<Flat> {
    let mut map = Flat::new();
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_error(format!("`--set {s}` is not key=value")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        map.insert(k.trim().to_string(), value);
    }
    Ok(map)
}

/// File keys first, then overrides: later entries win.
pub fn layered(file: Option<&Path>, sets: &[String]) -> anyhow::Result<Flat> {
    let mut flat = match file {
        Some(p) => read_flat(p)?,
        None => Flat::new(),
    };
    flat.extend(parse_sets(sets)?);
    Ok(flat)
}

/// Distributes flat keys over the data, model and training sections.
pub fn experiment(flat: &Flat) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::from_flat(flat)?)
}

/// A synthetic-data spec from flat keys over the defaults.
pub fn synthetic(flat: &Flat) -> anyhow::Result<SyntheticSpec> {
    let mut spec = match serde_json::to_value(SyntheticSpec::default()) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("specs serialize to objects"),
    };
    for (key, value) in flat {
        if !spec.contains_key(key) {
            bail!(config_error(format!("unknown spec key `{key}`")));
        }
        spec.insert(key.clone(), value.clone());
    }
    let spec: SyntheticSpec = serde_json::from_value(Value::Object(spec))
        .map_err(|e| config_error(format!("spec settings: {e}")))?;
    spec.validate().map_err(anyhow::Error::from)?;
    Ok(spec)
}

/// Comma-separated list; an empty string is an empty list.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect()
}

pub fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    split_list(s)
        .iter()
        .map(|v| {
            v.parse()
                .with_context(|| format!("seed `{v}`"))
                .map_err(|e| config_error(format!("{e:#}")))
        })
        .collect::<anyhow::Result<Vec<u64>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(anyhow!(config_error("no seeds given")))
            } else {
                Ok(v)
            }
        })
}
