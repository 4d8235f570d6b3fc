//! Flat `key = value` configuration files.
//!
//! One entry per line; `#` starts a comment; values are integers, floats,
//! strings, or comma-separated lists of numbers. Every key in a file must be
//! consumed by the reader, otherwise loading fails naming the stray key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self {
            entries,
            used: Default::default(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse list item `{}`", p.trim())))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Fails on the first key that no reader asked for.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        match self.entries.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(Error::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }
}

/// Writes entries in `key = value` form, one per line.
pub fn render(entries: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in entries {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

pub fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_lists_and_comments() {
        let kv = KvFile::parse("# header\nlr = 0.01  # trailing\nname = zip\nscales = 16, 32\n").unwrap();
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(0.01));
        assert_eq!(kv.get::<String>("name").unwrap().as_deref(), Some("zip"));
        assert_eq!(kv.list::<f64>("scales").unwrap(), Some(vec![16.0, 32.0]));
        kv.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let kv = KvFile::parse("lr = 1\nbogus = 2\n").unwrap();
        kv.get::<f64>("lr").unwrap();
        match kv.finish() {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "bogus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines() {
        assert!(KvFile::parse("novalue\n").is_err());
        assert!(KvFile::parse("a = 1\na = 2\n").is_err());
        let kv = KvFile::parse("n = x\n").unwrap();
        assert!(kv.get::<usize>("n").is_err());
    }
}
