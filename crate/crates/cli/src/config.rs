//! Flat key=value configuration files with command-line overrides.
//!
//! A config file holds one `key = value` pair per line; `#` starts a
//! comment. Flags always win over file entries, file entries over
//! defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    /// Every resolved key=value, recorded for the run manifest.
    resolved: std::cell::RefCell<BTreeMap<String, String>>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::User(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::User(format!(
                        "config {} line {}: expected key=value",
                        path.display(),
                        i + 1
                    ))
                })?;
                file.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Settings { file, resolved: Default::default() })
    }

    /// Flag > config file > default.
    pub fn get<T: FromStr + ToString>(
        &self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T, CliError> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw.parse().map_err(|_| {
                    CliError::User(format!("config key {key}: cannot parse value {raw:?}"))
                })?,
                None => default,
            },
        };
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Required setting with no default.
    pub fn require<T: FromStr + ToString>(
        &self,
        key: &str,
        flag: Option<T>,
    ) -> Result<T, CliError> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw.parse().map_err(|_| {
                    CliError::User(format!("config key {key}: cannot parse value {raw:?}"))
                })?,
                None => {
                    return Err(CliError::User(format!(
                        "missing required setting {key} (flag or config file)"
                    )))
                }
            },
        };
        self.resolved
            .borrow_mut()
            .insert(key.to_string(), value.to_string());
        Ok(value)
    }

    pub fn require_path(&self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let path: PathBuf = self.require(key, flag.map(|p| p.display().to_string()))?.into();
        if !path.exists() {
            return Err(CliError::User(format!(
                "{key}: file {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn optional_path(&self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        let raw = match flag {
            Some(p) => Some(p.display().to_string()),
            None => self.file.get(key).cloned(),
        };
        match raw {
            None => Ok(None),
            Some(raw) => {
                self.resolved.borrow_mut().insert(key.to_string(), raw.clone());
                let path = PathBuf::from(raw);
                if !path.exists() {
                    return Err(CliError::User(format!(
                        "{key}: file {} does not exist",
                        path.display()
                    )));
                }
                Ok(Some(path))
            }
        }
    }

    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.resolved.borrow().clone()
    }
}
