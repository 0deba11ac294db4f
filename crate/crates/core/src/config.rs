//! `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys are case-sensitive and may not repeat. Consumers take the keys they
//! know and call [`KeyValues::finish`] to reject the rest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    used: std::collections::BTreeSet<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value")))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {line_no}: empty key")));
            }
            if entries
                .insert(key.to_string(), (line_no, v.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!("line {line_no}: duplicate key {key}")));
            }
        }
        Ok(Self {
            entries,
            used: Default::default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        let line = self.entries.get(key).map_or(0, |e| e.0);
        self.entries.insert(key.to_string(), (line, value.to_string()));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.entries.get(key).map(|e| e.1.clone());
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))),
        }
    }

    /// Overwrite `target` when `key` is present.
    pub fn update<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *target = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|e| Error::Config(format!("{key} item {p:?}: {e}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Keys starting with `prefix`, with the prefix stripped.
    pub fn with_prefix(&mut self, prefix: &str) -> Vec<(String, String)> {
        let hits: Vec<(String, String)> = self
            .entries
            .iter()
            .filter_map(|(k, (_, v))| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect();
        for (k, _) in &hits {
            self.used.insert(format!("{prefix}{k}"));
        }
        hits
    }

    /// Fail on any key nobody asked for.
    pub fn finish(&self) -> Result<()> {
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !self.used.contains(*k))
            .map(|(k, (line, _))| format!("{k} (line {line})"))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// Canonical text form: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, (_, v))| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_types() {
        let mut kv = KeyValues::parse("# plan\nruns = 3\n\nlr=0.001 # fast\nbands = 900, 1800\n").unwrap();
        assert_eq!(kv.get::<usize>("runs").unwrap(), Some(3));
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(kv.list::<f64>("bands").unwrap(), Some(vec![900.0, 1800.0]));
        assert_eq!(kv.get::<u64>("seed").unwrap(), None);
        kv.finish().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(KeyValues::parse("runs 3").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse(" = 2").is_err());
        let mut kv = KeyValues::parse("runs = many\nextra = 1").unwrap();
        assert!(kv.get::<usize>("runs").is_err());
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("extra"));
    }

    #[test]
    fn prefix_and_round_trip() {
        let mut kv = KeyValues::parse("raster.north = a.dsr\nraster.south = b.dsr\nraster = c.dsr").unwrap();
        let hits = kv.with_prefix("raster.");
        assert_eq!(hits.len(), 2);
        kv.raw("raster");
        kv.finish().unwrap();
        let again = KeyValues::parse(&kv.to_text()).unwrap();
        assert_eq!(again.to_text(), kv.to_text());
    }
}
