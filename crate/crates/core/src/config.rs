//! Flat `key = value` configuration text.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. The
//! same format is used for config files, `--set` overrides and the metadata
//! block of checkpoints.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value entries. Later entries override earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            kv.set_assignment(line).map_err(|_| {
                Error::config(
                    "config",
                    format!("line {}: expected key = value, got {raw:?}", lineno + 1),
                )
            })?;
        }
        Ok(kv)
    }

    /// Applies a single `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            Error::config("config", format!("expected key=value, got {assignment:?}"))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config("config", "empty key"));
        }
        self.entries.insert(k.to_string(), v.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Parses `key` into `T`, leaving `target` untouched if absent.
    pub fn read<T: FromStr>(&self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key) {
            *target = v
                .parse()
                .map_err(|e: T::Err| Error::config(key, format!("cannot parse {v:?}: {e}")))?;
        }
        Ok(())
    }

    /// Fails on the first key not in `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !known.contains(&k) {
                return Err(Error::config(k, "unknown configuration key"));
            }
        }
        Ok(())
    }

    /// Canonical text: sorted keys, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

/// Formats a float so that parsing it back gives the same bits.
pub fn float_text(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut kv = KeyValues::parse("# header\na = 1\nb=two # trailing\n\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two"));
        kv.set_assignment("a=3").unwrap();
        let mut a = 0u32;
        kv.read("a", &mut a).unwrap();
        assert_eq!(a, 3);
        assert!(kv.read("b", &mut a).is_err());
        assert!(KeyValues::parse("novalue").is_err());
        assert!(kv.reject_unknown(&["a"]).is_err());
        assert!(kv.reject_unknown(&["a", "b"]).is_ok());
    }

    #[test]
    fn text_roundtrip() {
        let mut kv = KeyValues::new();
        kv.set("x", float_text(0.1 + 0.2));
        kv.set("name", "focus");
        let back = KeyValues::parse(&kv.to_text()).unwrap();
        assert_eq!(back, kv);
        let mut x = 0.0f64;
        back.read("x", &mut x).unwrap();
        assert_eq!(x, 0.1 + 0.2);
    }
}
