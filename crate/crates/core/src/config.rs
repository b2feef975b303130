//! Flat `key = value` text with optional `[section]` headers.
//!
//! Keys inside a section are prefixed with `section.`. Lines starting with `#`
//! or `;` are comments. A key may appear only once unless the caller allows
//! repeats for it.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<Entry>,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, |_| false)
    }

    pub fn parse_with(text: &str, repeatable: impl Fn(&str) -> bool) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| valid_name(n))
                    .ok_or_else(|| Error::parse(line, format!("bad section header '{trimmed}'")))?;
                section = format!("{name}.");
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| {
                Error::parse(line, format!("expected 'key = value', found '{trimmed}'"))
            })?;
            let key = key.trim();
            if !valid_name(key) {
                return Err(Error::parse(line, format!("bad key '{key}'")));
            }
            let key = format!("{section}{key}");
            if !repeatable(&key) {
                if let Some(prev) = entries.iter().find(|e| e.key == key) {
                    return Err(Error::parse(
                        line,
                        format!("'{key}' already set on line {}", prev.line),
                    ));
                }
            }
            entries.push(Entry {
                key,
                value: value.trim().to_owned(),
                line,
            });
        }
        Ok(KeyValues { entries })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.value.as_str())
    }

    /// Typed lookup; a value that does not parse is an error at its line.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|_| {
                Error::parse(e.line, format!("invalid value '{}' for '{key}'", e.value))
            }),
        }
    }

    /// Rejects keys outside `known`, naming the first offender.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self
            .entries
            .iter()
            .find(|e| !known.contains(&e.key.as_str()))
        {
            Some(e) => Err(Error::parse(e.line, format!("unknown key '{}'", e.key))),
            None => Ok(()),
        }
    }
}
