//! `key = value` text files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may not repeat.

use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Kv {
    entries: Vec<(String, String)>,
}

impl Kv {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            if entries.iter().any(|(e, _)| e == k) {
                return Err(Error::Config(format!("line {}: key {k:?} repeated", n + 1)));
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Parses one value, naming the key on failure.
    pub fn value<T: FromStr>(key: &str, value: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        value
            .parse()
            .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
    }

    pub fn flag(key: &str, value: &str) -> Result<bool> {
        match value {
            "true" | "on" | "1" => Ok(true),
            "false" | "off" | "0" => Ok(false),
            _ => Err(Error::Config(format!("bad value {value:?} for {key}: expected true or false"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_spacing() {
        let kv = Kv::parse("# header\n\n a = 1 \nb=two words\n").unwrap();
        assert_eq!(kv.get("a"), Some("1"));
        assert_eq!(kv.get("b"), Some("two words"));
        assert_eq!(kv.entries().len(), 2);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(Kv::parse("novalue\n").is_err());
        assert!(Kv::parse("= 3\n").is_err());
        assert!(Kv::parse("a = 1\na = 2\n").is_err());
        assert!(Kv::value::<usize>("a", "x").is_err());
        assert!(Kv::flag("a", "yes").is_err());
    }
}
