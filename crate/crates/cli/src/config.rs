//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may use `-` or
//! `_` interchangeably. A value given on the command line always wins over
//! the file, which wins over the built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub path: Option<PathBuf>,
    values: BTreeMap<String, String>,
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    /// An empty configuration (every lookup falls through).
    pub fn empty() -> Self {
        ConfigFile::default()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: &str| CliError::ConfigSyntax {
                path: path.to_path_buf(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| syntax("expected `key = value`"))?;
            let key = normalize_key(key);
            if key.is_empty() {
                return Err(syntax("empty key"));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(syntax(&format!("duplicate key {key:?}")));
            }
        }
        Ok(ConfigFile {
            path: Some(path.to_path_buf()),
            values,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Loads `path` when given, else an empty configuration.
    pub fn load_optional(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::empty()), Self::load)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize_key(key)).map(String::as_str)
    }

    /// Flag, then file, then `default`.
    pub fn resolve<T>(&self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.raw(key) {
            Some(text) => text.parse().map_err(|e: T::Err| CliError::ConfigValue {
                key: key.to_string(),
                reason: format!("cannot parse {text:?}: {e}"),
            }),
            None => Ok(default),
        }
    }

    /// Like [`ConfigFile::resolve`] for settings without a default.
    pub fn resolve_opt<T>(&self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|text| {
                text.parse().map_err(|e: T::Err| CliError::ConfigValue {
                    key: key.to_string(),
                    reason: format!("cannot parse {text:?}: {e}"),
                })
            })
            .transpose()
    }

    /// Boolean switch: a set flag wins, otherwise `true`/`false` from the file.
    pub fn switch(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        self.resolve(key, None, false)
    }

    /// Rejects keys outside `known`, catching typos in experiment files.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for key in self.values.keys() {
            if !known.iter().any(|k| normalize_key(k) == *key) {
                return Err(CliError::ConfigValue {
                    key: key.clone(),
                    reason: format!("unknown key (known: {})", known.join(", ")),
                });
            }
        }
        Ok(())
    }
}

/// Comma-separated list parsed element by element.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse::<T>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<Vec<T>, String>>()
            .map(List)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file_over_default() {
        let cfg = ConfigFile::parse("# experiment\nepochs = 50\nsemi-angle = 15.5\n", Path::new("x.cfg")).unwrap();
        assert_eq!(cfg.resolve("epochs", Some(10usize), 200).unwrap(), 10);
        assert_eq!(cfg.resolve("epochs", None, 200usize).unwrap(), 50);
        assert_eq!(cfg.resolve("semi_angle", None, 20.0).unwrap(), 15.5);
        assert_eq!(cfg.resolve("seed", None, 7u64).unwrap(), 7);
        assert!(cfg.check_known(&["epochs", "semi-angle"]).is_ok());
        assert!(cfg.check_known(&["epochs"]).is_err());
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = ConfigFile::parse("a = 1\nnonsense\n", Path::new("x.cfg")).unwrap_err();
        assert!(err.to_string().contains("x.cfg:2"));
        assert!(ConfigFile::parse("a = 1\na = 2\n", Path::new("x.cfg")).is_err());
        let cfg = ConfigFile::parse("epochs = many\n", Path::new("x.cfg")).unwrap();
        assert!(cfg.resolve("epochs", None, 1usize).is_err());
    }

    #[test]
    fn lists() {
        let l: List<usize> = "1, 2,5".parse().unwrap();
        assert_eq!(l.0, vec![1, 2, 5]);
        assert!("1,x".parse::<List<usize>>().is_err());
    }
}
