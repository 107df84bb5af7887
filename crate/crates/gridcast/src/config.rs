//! Plain-text `key = value` config files.
//!
//! One assignment per line, `#` starts a comment, blank lines are
//! ignored. Flags override file values; keys a command does not know are
//! rejected before any computation starts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::str::FromStr;

use crate::{CliError, Result};

pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::usage(format!(
                "config line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

/// Config-file values with use tracking, so leftover (unknown) keys can
/// be rejected.
pub struct ConfigSource {
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl ConfigSource {
    pub fn empty() -> Self {
        ConfigSource {
            values: BTreeMap::new(),
            used: BTreeSet::new(),
        }
    }

    pub fn load(path: Option<&PathBuf>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::empty());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        Ok(ConfigSource {
            values: parse_config_text(&text)?,
            used: BTreeSet::new(),
        })
    }

    /// Parses the file value for `key` if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.used.insert(key.to_string());
        match self.values.get(key) {
            None => Ok(None),
            Some(text) => text.parse().map(Some).map_err(|_| {
                CliError::usage(format!("config key '{key}': cannot parse '{text}'"))
            }),
        }
    }

    /// Errors on any key the command never consulted.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self
            .values
            .keys()
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::usage(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let map = parse_config_text("# a comment\n\nh = 64\nw=32   # trailing\n").unwrap();
        assert_eq!(map["h"], "64");
        assert_eq!(map["w"], "32");
        assert_eq!(map.len(), 2);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_config_text("just words\n").is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let mut src = ConfigSource {
            values: parse_config_text("h = 4\nbogus = 1\n").unwrap(),
            used: Default::default(),
        };
        let h: Option<usize> = src.take("h").unwrap();
        assert_eq!(h, Some(4));
        assert!(src.finish().is_err());
    }

    #[test]
    fn parse_failures_name_the_key() {
        let mut src = ConfigSource {
            values: parse_config_text("days = many\n").unwrap(),
            used: Default::default(),
        };
        let err = src.take::<usize>("days").unwrap_err();
        assert!(err.to_string().contains("days"));
    }
}
