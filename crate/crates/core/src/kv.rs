//! Flat `key = value` files used for model configs, pipeline configs, and
//! metric reports. Blank lines and `#` comments are ignored; keys keep file
//! order so that written files are byte-stable.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{EagerError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: Vec<(String, String)>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = KvFile::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EagerError::parse(origin, i + 1, "expected `key = value`"))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(EagerError::parse(origin, i + 1, "empty key"));
            }
            if kv.get(key).is_some() {
                return Err(EagerError::parse(origin, i + 1, format!("duplicate key `{key}`")));
            }
            kv.entries.push((key.to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EagerError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| EagerError::io(path, e))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Insert or replace, keeping the original position of an existing key.
    pub fn set(&mut self, key: &str, value: impl Display) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _)| k.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| EagerError::Config(format!("bad value for `{key}` ({v}): {e}"))),
        }
    }

    pub fn parsed_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }
}

impl Display for KvFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Parse a boolean the way config files spell them.
pub fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(EagerError::Config(format!("bad boolean for `{key}`: {v}"))),
    }
}

pub fn parse_list(v: &str) -> Vec<String> {
    v.trim_matches(|c| c == '[' || c == ']')
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_roundtrips() {
        let text = "# model\nhidden = 128\nstreams=[behavior, semantic]\n\n";
        let kv = KvFile::parse(text, Path::new("x")).unwrap();
        assert_eq!(kv.parsed::<usize>("hidden").unwrap(), Some(128));
        assert_eq!(
            parse_list(kv.get("streams").unwrap()),
            vec!["behavior", "semantic"]
        );
        let again = KvFile::parse(&kv.to_string(), Path::new("y")).unwrap();
        assert_eq!(kv, again);
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(KvFile::parse("a=1\na=2", Path::new("x")).is_err());
        let err = KvFile::parse("a=1\nnot a pair", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains(":2:"));
    }
}
