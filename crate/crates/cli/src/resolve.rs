//! Config file plus `--set` overrides into a validated `ExperimentConfig`.

use std::path::Path;

use creat_core::config::ExperimentConfig;
use creat_core::{Error, Result};
use serde_json::{Map, Value};

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Reads TOML, or JSON when the file ends in `.json` (resolved snapshots).
pub fn read_tree(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        return Ok(serde_json::from_str(&text)?);
    }
    let table: toml::Table = toml::from_str(&text).map_err(|e| config_error(path.display().to_string(), e.message()))?;
    Ok(serde_json::to_value(table)?)
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_literal(raw: &str) -> Result<Value> {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => Ok(serde_json::to_value(t.remove("v").expect("key v"))?),
        Err(_) => Ok(Value::String(raw.to_string())),
    }
}

pub fn apply_override(tree: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_error(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "empty key segment"));
    }
    let value = parse_literal(raw.trim())?;
    let mut node = tree;
    for (depth, part) in parts.iter().enumerate() {
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("object")
            }
            _ => return Err(config_error(parts[..depth].join("."), "is not a section")),
        };
        if depth + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

pub fn from_tree(tree: Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let key = e.path().to_string();
        config_error(key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve(config: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut tree = match config {
        Some(p) => read_tree(p)?,
        None => Value::Object(Map::new()),
    };
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    from_tree(tree)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(r: Result<ExperimentConfig>) -> String {
        match r {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn overrides_set_nested_values() {
        let mut tree = serde_json::json!({"attack": {"K": 2}});
        apply_override(&mut tree, "attack.K=3").unwrap();
        apply_override(&mut tree, "ot.sample_axis=global").unwrap();
        apply_override(&mut tree, "seed = 9").unwrap();
        let cfg = from_tree(tree).unwrap();
        assert_eq!(cfg.attack.budget, 3);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn errors_name_the_key() {
        let mut tree = Value::Object(Map::new());
        apply_override(&mut tree, "attack.fraction=1.5").unwrap();
        assert_eq!(key_of(from_tree(tree)), "attack.fraction");

        let mut tree = Value::Object(Map::new());
        apply_override(&mut tree, "attack.K=two").unwrap();
        assert_eq!(key_of(from_tree(tree)), "attack.K");

        let mut tree = Value::Object(Map::new());
        apply_override(&mut tree, "rec.bogus=1").unwrap();
        assert!(key_of(from_tree(tree)).starts_with("rec"));
    }

    #[test]
    fn malformed_override_is_rejected() {
        let mut tree = Value::Object(Map::new());
        assert!(apply_override(&mut tree, "attack.K").is_err());
        assert!(apply_override(&mut tree, "attack..K=1").is_err());
        apply_override(&mut tree, "seed=1").unwrap();
        assert!(apply_override(&mut tree, "seed.x=1").is_err());
    }
}
