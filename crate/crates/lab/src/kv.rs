//! Flat `key = value` files.
//!
//! One pair per line, `#` starts a comment line, blank lines are skipped.
//! Keys are unique; values run to the end of the line and are trimmed.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    pub entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| LabError::Config(format!("{origin}:{}: {msg}", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| bad("expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(bad("malformed key"));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(&format!("duplicate key `{k}`")));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

/// Render pairs in the given order.
pub fn render(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| LabError::Config(format!("invalid value `{value}` for `{key}`")))
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(LabError::Config(format!("invalid value `{value}` for `{key}` (true|false)"))),
    }
}

pub fn render_list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}
