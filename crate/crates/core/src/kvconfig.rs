//! Plain-text `key=value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! unknown keys are errors so typos never pass silently.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("expected key=value, got `{line}`"),
            })?;
            let key = k.trim().to_string();
            if entries
                .insert(key.clone(), (v.trim().to_string(), idx + 1))
                .is_some()
            {
                return Err(Error::config(key, "given more than once"));
            }
        }
        Ok(KvFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        KvFile {
            entries: pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), (v.to_string(), 0)))
                .collect(),
        }
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((v, _)) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(key, format!("cannot parse `{v}`"))),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_required<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?
            .ok_or_else(|| Error::config(key, "required key is missing"))
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(Error::config(k, format!("unknown key (line {line})"))),
        }
    }
}
