//! Reading configuration documents in TOML or JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid TOML in {path}: {message}")]
    Toml { path: PathBuf, message: String },
    #[error("invalid JSON in {path}: {message}")]
    Json { path: PathBuf, message: String },
    #[error("bad override {spec:?}: {message}")]
    Override { spec: String, message: String },
}

/// Parses `path` as TOML when it has a `.toml` extension and as JSON otherwise.
pub fn read_document<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_document(path, &text)
}

pub fn parse_document<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    let is_toml = path
        .extension()
        .map(|ext| ext.eq_ignore_ascii_case("toml"))
        .unwrap_or(false);
    if is_toml {
        toml::from_str(text).map_err(|e| ConfigError::Toml {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    } else {
        serde_json::from_str(text).map_err(|e| ConfigError::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Applies one `dotted.path=value` override to a parsed document. The value is
/// read as JSON when it parses as JSON and taken as a plain string otherwise.
/// Missing intermediate tables are created; array elements are addressed by index.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<(), ConfigError> {
    let fail = |message: String| ConfigError::Override {
        spec: spec.to_string(),
        message,
    };
    let (path, raw) = spec.split_once('=').ok_or_else(|| fail("expected key=value".into()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(fail("empty key segment".into()));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        if node.is_null() {
            *node = serde_json::Value::Object(Default::default());
        }
        node = match node {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert(serde_json::Value::Null)
            }
            serde_json::Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| fail(format!("{key:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| fail(format!("index {idx} out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(fail(format!("{key:?} does not address a table"))),
        };
    }
    unreachable!("the loop returns on the last key")
}

/// Reads a document, applies `overrides` in order and deserializes the result.
/// Also returns the effective document.
pub fn read_with_overrides<T: DeserializeOwned>(
    path: &Path,
    overrides: &[String],
) -> Result<(T, serde_json::Value), ConfigError> {
    let mut doc: serde_json::Value = read_document(path)?;
    for spec in overrides {
        apply_override(&mut doc, spec)?;
    }
    let typed = serde_json::from_value(doc.clone()).map_err(|e| ConfigError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok((typed, doc))
}
