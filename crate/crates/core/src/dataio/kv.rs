//! Flat `key = value` text files used for configs and scene specs.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SlamError};

/// Parsed key/value pairs. Values are consumed with the `take_*` methods so
/// that [`KeyValues::finish`] can report unknown keys.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SlamError::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(SlamError::parse(i + 1, "empty key"));
            }
            if entries.insert(key.clone(), (i + 1, v.trim().to_string())).is_some() {
                return Err(SlamError::parse(i + 1, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn take_str(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key).map(|(_, v)| v)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| SlamError::parse(line, format!("invalid value `{v}` for `{key}`"))),
        }
    }

    /// Overwrites `slot` if the key is present.
    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Whitespace- or comma-separated list of numbers.
    pub fn take_list(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| SlamError::parse(line, format!("invalid number `{s}` in `{key}`"))))
                .collect::<Result<Vec<_>>>()
                .map(Some),
        }
    }

    /// Errors if any key was never consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(SlamError::parse(line, format!("unknown key `{k}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_values_comments_and_lists() {
        let mut kv = KeyValues::parse("# header\na = 1.5\nname = room # trailing\nlist = 1, 2 3\n\n").unwrap();
        assert_eq!(kv.take::<f64>("a").unwrap(), Some(1.5));
        assert_eq!(kv.take_str("name").as_deref(), Some("room"));
        assert_eq!(kv.take_list("list").unwrap(), Some(vec![1.0, 2.0, 3.0]));
        assert_eq!(kv.take::<f64>("missing").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn reports_bad_lines_and_unknown_keys() {
        assert!(matches!(KeyValues::parse("a = 1\nnonsense"), Err(SlamError::Parse { line: 2, .. })));
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        let mut kv = KeyValues::parse("a = x").unwrap();
        assert!(kv.take::<f64>("a").is_err());
        let kv = KeyValues::parse("typo = 1").unwrap();
        assert!(matches!(kv.finish(), Err(SlamError::Parse { line: 1, .. })));
    }
}
