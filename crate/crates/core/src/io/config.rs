use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key = value` lines. `#` starts a comment. Consumers take the keys
/// they understand and [`finish`](Self::finish) rejects whatever is left.
#[derive(Debug, Clone, Default)]
pub struct ConfigEntries {
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigEntries {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::ConfigFile { line, reason: format!("expected key=value, got {content:?}") })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::ConfigFile { line, reason: "empty key".into() });
            }
            if let Some((first, _)) = entries.insert(key.to_string(), (line, value.trim().to_string())) {
                return Err(Error::ConfigFile { line, reason: format!("{key} already set on line {first}") });
            }
        }
        Ok(ConfigEntries { entries })
    }

    pub fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    pub fn take_parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::ConfigFile { line, reason: format!("{key}: {e}") }),
        }
    }

    /// Comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|item| item.trim().parse())
                .collect::<std::result::Result<Vec<T>, _>>()
                .map(Some)
                .map_err(|e| Error::ConfigFile { line, reason: format!("{key}: {e}") }),
        }
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (line, _))| *line) {
            None => Ok(()),
            Some((key, (line, _))) => Err(Error::ConfigFile { line, reason: format!("unknown key {key:?}") }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_rejects_unknown() {
        let mut c = ConfigEntries::parse("# net\ndepth = 2 # two\n\nwidths=3, 4\nnonlin=modulus\n").unwrap();
        assert_eq!(c.take_parsed::<usize>("depth").unwrap(), Some(2));
        assert_eq!(c.take_list::<usize>("widths").unwrap(), Some(vec![3, 4]));
        assert_eq!(c.take_parsed::<usize>("missing").unwrap(), None);
        match c.finish() {
            Err(Error::ConfigFile { line: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(ConfigEntries::parse("a=1\na=2"), Err(Error::ConfigFile { line: 2, .. })));
        assert!(matches!(ConfigEntries::parse("novalue"), Err(Error::ConfigFile { line: 1, .. })));
        let mut c = ConfigEntries::parse("depth=x").unwrap();
        assert!(c.take_parsed::<usize>("depth").is_err());
    }
}
