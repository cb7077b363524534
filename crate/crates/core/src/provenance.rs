//! Ordered `key=value` provenance records shared by every output artifact.

use std::fmt;
use std::io::Write;

/// Ordered `key=value` provenance entries, written as `# key=value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        let key = key.into();
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| *k == key) {
            Some(entry) => entry.1 = value,
            None => self.entries.push((key, value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn extend(&mut self, other: &Metadata) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    pub fn write_comments<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (k, v) in self.iter() {
            writeln!(w, "# {k}={v}")?;
        }
        Ok(())
    }

    /// Parses a `# key=value` comment line; other comments are ignored.
    pub fn absorb_comment(&mut self, line: &str) {
        if let Some((k, v)) = line.trim_start_matches('#').trim().split_once('=') {
            self.set(k.trim(), v.trim());
        }
    }
}
