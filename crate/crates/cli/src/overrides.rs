//! Dotted-path `key=value` overrides applied to the JSON form of a config.

use serde_json::{Map, Value};

use crate::CliError;

/// Splits `geometry.n_cols=11` into the path and a JSON value. Values that
/// do not parse as JSON are taken as strings.
pub fn parse_override(text: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {text:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Validation(format!(
            "override key {key:?} has an empty segment"
        )));
    }
    let raw = raw.trim();
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

/// Sets every override on `doc`. Missing intermediate objects are created;
/// unknown leaf keys are left for the typed deserialiser to reject.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    for text in overrides {
        let (path, value) = parse_override(text)?;
        let mut node = &mut *doc;
        for (depth, seg) in path.iter().enumerate() {
            let obj = node.as_object_mut().ok_or_else(|| {
                CliError::Validation(format!(
                    "override {text:?}: {} is not an object",
                    path[..depth].join(".")
                ))
            })?;
            if depth + 1 == path.len() {
                obj.insert(seg.clone(), value.clone());
                break;
            }
            node = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
        }
    }
    Ok(())
}

/// Recursively overlays `patch` on `base`; objects merge, anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
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
