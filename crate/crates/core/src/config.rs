//! JSON configuration files with dotted-path overrides such as
//! `optim.lr=0.5`.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

/// Reads a (possibly partial) config file; absent fields take defaults.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))
}

/// Sets each dotted `key` to `value`. Values are parsed as JSON when
/// possible and taken as strings otherwise. Unknown keys are rejected.
pub fn apply_overrides<T>(cfg: T, overrides: &[(String, String)]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut root = serde_json::to_value(&cfg)?;
    for (key, raw) in overrides {
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown option {key}")))?;
        }
        if node.is_object() {
            return Err(Error::Config(format!("option {key} is a section, not a value")));
        }
        *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid override: {e}")))
}

/// Splits `--a.b value` / `--a.b=value` argument lists into pairs.
pub fn parse_override_args(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("unexpected argument {a}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("option --{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}
