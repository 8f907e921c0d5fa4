//! Layered JSON configuration: defaults, then a file, then command-line
//! overrides. Every layer is checked against the default document so a
//! misspelled key is an error rather than a silent no-op.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

/// One `dotted.key = value` override from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn new(key: &str, value: Value) -> Self {
        Self {
            key: key.to_string(),
            value,
        }
    }

    /// Parses `key=value`; the value is read as JSON and falls back to a
    /// plain string.
    pub fn parse(spec: &str) -> CliResult<Self> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {spec:?}")))?;
        let key = key.trim().replace('-', "_");
        if key.is_empty() {
            return Err(CliError::Usage(format!("--set has an empty key in {spec:?}")));
        }
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Self { key, value })
    }
}

/// A manifest is accepted as a config file: its `config` member is used.
fn unwrap_manifest(doc: Value, subcommand: &str) -> CliResult<Value> {
    match doc {
        Value::Object(mut map) if map.contains_key("subcommand") && map.contains_key("config") => {
            let found = map.get("subcommand").and_then(Value::as_str).unwrap_or_default().to_string();
            if found != subcommand {
                return Err(CliError::Usage(format!(
                    "manifest was written by {found:?}, not {subcommand:?}"
                )));
            }
            Ok(map.remove("config").expect("checked above"))
        }
        other => Ok(other),
    }
}

fn check_known(defaults: &Value, layer: &Value, path: &str) -> CliResult<()> {
    if let (Value::Object(d), Value::Object(l)) = (defaults, layer) {
        for (k, v) in l {
            let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            let known = d
                .get(k)
                .ok_or_else(|| CliError::Usage(format!("unknown config key {child:?}")))?;
            check_known(known, v, &child)?;
        }
    }
    Ok(())
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, layer) => *slot = layer,
    }
}

/// Builds the nested object for `a.b.c = v`. A plain string aimed at an
/// array-valued default is split on commas, so `--set n_list=1,2` works.
fn override_layer(defaults: &Value, ov: &Override) -> CliResult<Value> {
    let parts: Vec<&str> = ov.key.split('.').collect();
    let mut target = defaults;
    for (i, p) in parts.iter().enumerate() {
        target = target.get(p).ok_or_else(|| {
            CliError::Usage(format!("unknown config key {:?}", parts[..=i].join(".")))
        })?;
    }
    let mut value = ov.value.clone();
    if let (Value::Array(_), Value::String(s)) = (target, &value) {
        value = Value::Array(
            s.split(',')
                .map(|item| {
                    let item = item.trim();
                    serde_json::from_str(item).unwrap_or_else(|_| Value::String(item.to_string()))
                })
                .collect(),
        );
    }
    for p in parts.iter().rev() {
        let mut m = Map::new();
        m.insert((*p).to_string(), value);
        value = Value::Object(m);
    }
    Ok(value)
}

/// Resolves a config with precedence command line > file > default.
pub fn resolve<T>(subcommand: &str, file: Option<&Path>, overrides: &[Override]) -> CliResult<T>
where
    T: Serialize + DeserializeOwned + Default,
{
    let defaults = serde_json::to_value(T::default()).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut doc = defaults.clone();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let layer: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not JSON: {e}", path.display())))?;
        let layer = unwrap_manifest(layer, subcommand)?;
        check_known(&defaults, &layer, "")?;
        merge(&mut doc, layer);
    }
    for ov in overrides {
        merge(&mut doc, override_layer(&defaults, ov)?);
    }
    serde_json::from_value(doc).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        x: f64,
        list: Vec<usize>,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Cfg {
        seed: u64,
        inner: Inner,
    }

    impl Default for Cfg {
        fn default() -> Self {
            Self {
                seed: 1,
                inner: Inner {
                    x: 0.5,
                    list: vec![1, 2],
                },
            }
        }
    }

    #[test]
    fn command_line_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 7, "inner": {"x": 2.0}}"#).unwrap();
        let cfg: Cfg = resolve("t", Some(&path), &[Override::parse("seed=9").unwrap()]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.inner.x, 2.0);
        assert_eq!(cfg.inner.list, vec![1, 2]);
    }

    #[test]
    fn comma_lists_and_dotted_keys() {
        let cfg: Cfg = resolve("t", None, &[Override::parse("inner.list=3,4,5").unwrap()]).unwrap();
        assert_eq!(cfg.inner.list, vec![3, 4, 5]);
        let cfg: Cfg = resolve("t", None, &[Override::parse("inner.list=[6]").unwrap()]).unwrap();
        assert_eq!(cfg.inner.list, vec![6]);
    }

    #[test]
    fn unknown_keys_and_bad_types_are_usage_errors() {
        assert!(matches!(
            resolve::<Cfg>("t", None, &[Override::parse("inner.y=1").unwrap()]),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            resolve::<Cfg>("t", None, &[Override::parse("seed=abc").unwrap()]),
            Err(CliError::Usage(_))
        ));
        assert!(Override::parse("novalue").is_err());
    }

    #[test]
    fn manifests_are_accepted_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        std::fs::write(&path, r#"{"subcommand": "t", "config": {"seed": 4}}"#).unwrap();
        let cfg: Cfg = resolve("t", Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert!(resolve::<Cfg>("other", Some(&path), &[]).is_err());
    }
}
