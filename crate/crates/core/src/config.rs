//! Flat `key = value` configuration files.
//!
//! ```text
//! # toy model
//! layers = 32
//! experts = 8
//! mixing_scale = 0.1
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear at
//! most once.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, found {line:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            if entries
                .insert(key.to_string(), value.trim().to_string())
                .is_some()
            {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(FlatConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.entries
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key:?}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Fails on any key outside `known`.
    pub fn ensure_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Config(format!(
                "unknown key {k:?} (known keys: {})",
                known.join(", ")
            ))),
            None => Ok(()),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = FlatConfig::parse("# c\n\nlayers = 4\n  seed=7  \n").unwrap();
        assert_eq!(c.get::<usize>("layers").unwrap(), Some(4));
        assert_eq!(c.get_or::<u64>("seed", 1).unwrap(), 7);
        assert_eq!(c.get_or::<u64>("tokens", 9).unwrap(), 9);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(
            FlatConfig::parse("a = 1\na = 2").unwrap_err(),
            Error::Parse { line: 2, .. }
        ));
        assert!(FlatConfig::parse("just words").is_err());
        assert!(FlatConfig::parse(" = 3").is_err());
    }

    #[test]
    fn bad_value_and_unknown_key() {
        let c = FlatConfig::parse("layers = many\nfoo = 1").unwrap();
        assert!(c.get::<usize>("layers").is_err());
        assert!(c.ensure_known(&["layers"]).is_err());
        assert!(c.ensure_known(&["layers", "foo"]).is_ok());
    }
}
