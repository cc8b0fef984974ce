//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` comments and blank lines skipped,
//! duplicate keys rejected. Parse and type errors name the origin and
//! line number. Consumers mark keys as they read them so leftover
//! (misspelled) keys can be turned into errors instead of being
//! silently ignored.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
}

/// A parsed configuration file with read-tracking.
#[derive(Debug)]
pub struct ConfigMap {
    origin: String,
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl ConfigMap {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses `text`; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoreError::config(format!(
                    "{origin}:{lineno}: expected 'key = value', found '{line}'"
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !valid_key(key) {
                return Err(CoreError::config(format!(
                    "{origin}:{lineno}: invalid key '{key}'"
                )));
            }
            if let Some(prev) = entries.get(key) {
                return Err(CoreError::config(format!(
                    "{origin}:{lineno}: duplicate key '{key}' (first set on line {})",
                    prev.line
                )));
            }
            entries.insert(
                key.to_owned(),
                Entry {
                    value: value.to_owned(),
                    line: lineno,
                },
            );
        }
        Ok(ConfigMap {
            origin: origin.to_owned(),
            entries,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Raw string lookup; marks the key as read.
    pub fn get_str(&self, key: &str) -> Option<&str> {
        let e = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_owned());
        Some(&e.value)
    }

    fn get_as<T: FromStr>(&self, key: &str, ty: &str) -> Result<Option<T>> {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.to_owned());
        e.value.parse::<T>().map(Some).map_err(|_| {
            CoreError::config(format!(
                "{}:{}: key '{key}': invalid {ty} '{}'",
                self.origin, e.line, e.value
            ))
        })
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get_as(key, "number")
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get_as(key, "unsigned integer")
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get_as(key, "unsigned integer")
    }

    pub fn get_u32(&self, key: &str) -> Result<Option<u32>> {
        self.get_as(key, "unsigned integer")
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        self.used.borrow_mut().insert(key.to_owned());
        match e.value.as_str() {
            "true" => Ok(Some(true)),
            "false" => Ok(Some(false)),
            other => Err(CoreError::config(format!(
                "{}:{}: key '{key}': expected true or false, found '{other}'",
                self.origin, e.line
            ))),
        }
    }

    /// Applies `f` to the value if the key is present.
    pub fn with_f64(&self, key: &str, f: impl FnOnce(f64)) -> Result<()> {
        if let Some(v) = self.get_f64(key)? {
            f(v);
        }
        Ok(())
    }

    /// Errors if any key was never read by a getter, listing the
    /// strays with their line numbers.
    pub fn ensure_all_used(&self) -> Result<()> {
        let used = self.used.borrow();
        let strays: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !used.contains(*k))
            .map(|(k, e)| format!("'{k}' (line {})", e.line))
            .collect();
        if strays.is_empty() {
            Ok(())
        } else {
            Err(CoreError::config(format!(
                "{}: unknown key{} {}",
                self.origin,
                if strays.len() == 1 { "" } else { "s" },
                strays.join(", ")
            )))
        }
    }
}

/// Writes `pairs` as a `key = value` file, one per line, in the order
/// given. Callers sort the pairs when a canonical order matters.
pub fn write_config(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        if !valid_key(k) {
            return Err(CoreError::config(format!("invalid key '{k}'")));
        }
        out.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

/// Formats a float so it parses back to the identical value.
pub fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().ok(), Some(v));
    s
}
