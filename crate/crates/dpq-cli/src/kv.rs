//! Flat `key=value` config files for the non-training commands.
//! Same surface syntax the trainer's config uses: `#` starts a comment,
//! blank lines are ignored, keys are snake_case mirrors of the flags.

use std::collections::BTreeMap;
use std::path::Path;

use dpq_core::{DpqError, Result};

#[derive(Debug, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    /// Load a config file, or an empty table when no path was given.
    pub fn load(path: Option<&Path>) -> Result<KvFile> {
        let Some(path) = path else {
            return Ok(KvFile::default());
        };
        let text = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DpqError::Config(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                ))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvFile { entries })
    }

    /// Reject keys this command does not understand.
    pub fn allow_only(&self, allowed: &[&str]) -> Result<()> {
        for key in self.entries.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(DpqError::Config(format!(
                    "unknown config key '{key}' (expected one of: {})",
                    allowed.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Typed lookup; absent keys give `None`.
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|_| {
                DpqError::Config(format!("bad value '{raw}' for key '{key}'"))
            }),
        }
    }

    /// Raw lookup for string-valued keys.
    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }
}

/// Three-level resolution: flag beats config file beats default.
pub fn resolve<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
