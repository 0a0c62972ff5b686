//! Config documents: TOML or JSON, plus dotted `key=value` overrides applied
//! before the schema check.

use std::path::Path;

use ef_target::{Error, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

/// Parse a config file; the format follows the extension, and unknown
/// extensions try JSON first, then TOML.
pub fn load(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let toml_value = |t: &str| -> Result<Value> {
        let v: toml::Value = toml::from_str(t).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(serde_json::to_value(v)?)
    };
    match ext.as_str() {
        "toml" => toml_value(&text),
        "json" => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        _ => serde_json::from_str(&text).or_else(|_| toml_value(&text)),
    }
}

/// Apply `a.b.c=value`. The value is read as JSON when it parses as JSON and
/// as a plain string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        let Value::Object(map) = node else {
            return Err(Error::Config(format!("override {key}: {} is not a table", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

/// Deserialize into the typed schema, naming the offending field on error.
pub fn resolve<T: DeserializeOwned>(doc: Value) -> Result<T> {
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Option<Value>> {
    let mut doc = match path {
        Some(p) => load(p)?,
        None if overrides.is_empty() => return Ok(None),
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    Ok(Some(doc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_create_and_replace_nested_keys() {
        let mut doc = json!({"loss": {"beta": 1.0}, "label": "x"});
        apply_override(&mut doc, "loss.beta=0").unwrap();
        apply_override(&mut doc, "train.optimizer.lr=0.01").unwrap();
        apply_override(&mut doc, "label=run a").unwrap();
        apply_override(&mut doc, "model.rep_dims=[8,8]").unwrap();
        assert_eq!(doc, json!({"loss": {"beta": 0}, "label": "run a", "train": {"optimizer": {"lr": 0.01}}, "model": {"rep_dims": [8, 8]}}));
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        let mut doc = json!({"label": "x"});
        for bad in ["nokey", "=3", "a..b=1", "label.inner=2"] {
            let e = apply_override(&mut doc, bad).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{bad}");
        }
    }
}
