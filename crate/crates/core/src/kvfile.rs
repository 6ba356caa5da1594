//! `key=value` sidecar files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{bail, Result};

/// Ordered `key=value` map as stored in manifests and config sidecars.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        match self.0.get(key) {
            Some(v) => Ok(v),
            None => bail!(Parse, "missing key `{key}`"),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get_str(key)?;
        match raw.parse() {
            Ok(v) => Ok(v),
            Err(_) => bail!(Parse, "bad value `{raw}` for key `{key}`"),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!(Parse, "line {}: expected key=value, got `{line}`", n + 1);
            };
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_lookup() {
        let m = KvMap::parse("k=4\n# note\nc = 32\n\n").unwrap();
        assert_eq!(m.get::<usize>("k").unwrap(), 4);
        assert_eq!(m.get::<usize>("c").unwrap(), 32);
        assert!(m.get::<usize>("n_ctx").is_err());
        assert!(KvMap::parse("oops").is_err());
    }
}
