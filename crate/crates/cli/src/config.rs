//! Flat `key = value` configuration with per-subcommand sections.
//!
//! Precedence, lowest first: built-in defaults, keys before any section,
//! keys in the `[<subcommand>]` section, `--set key=value` flags, then the
//! dedicated `--seed` flag. A manifest written by an earlier run can be
//! passed as the config file; its resolved `config` object is read back.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use mdlab::{Error, Result};

#[derive(Debug, Default)]
pub struct RunConfig {
    given: BTreeMap<String, String>,
    resolved: Mutex<BTreeMap<String, String>>,
}

/// Parses config text, keeping global keys and the keys of `section`.
pub fn parse_config(text: &str, section: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut current: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| Error::parse(n + 1, "unterminated section header"))?;
            current = Some(name.trim().to_string());
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(n + 1, format!("expected key = value, got {line:?}")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(n + 1, "empty key"));
        }
        if current.as_deref().is_none_or(|c| c == section) {
            out.insert(k.to_string(), v.trim().to_string());
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_map(given: BTreeMap<String, String>) -> Self {
        Self {
            given,
            resolved: Mutex::default(),
        }
    }

    /// Loads `path` (config text or a manifest) for `section`.
    pub fn load(path: &Path, section: &str) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let given = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            let cfg = v
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| Error::config("manifest has no config object"))?;
            cfg.iter()
                .map(|(k, v)| (k.clone(), v.as_str().map(String::from).unwrap_or_else(|| v.to_string())))
                .collect()
        } else {
            parse_config(&text, section)?
        };
        Ok(Self::from_map(given))
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.given.insert(key.to_string(), value.to_string());
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.given.get(key).map(String::as_str)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, BTreeMap<String, String>> {
        self.resolved.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn record(&self, key: &str, value: String) {
        self.lock().insert(key.to_string(), value);
    }

    pub fn get<T: FromStr + ToString>(&self, key: &str, default: T) -> Result<T> {
        let v = match self.raw(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::config(format!("cannot parse {key} = {s:?}")))?,
            None => default,
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn get_opt<T: FromStr + ToString>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None | Some("") | Some("none") => {
                self.record(key, "none".into());
                Ok(None)
            }
            Some(s) => {
                let v: T = s
                    .parse()
                    .map_err(|_| Error::config(format!("cannot parse {key} = {s:?}")))?;
                self.record(key, v.to_string());
                Ok(Some(v))
            }
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        let v = match self.raw(key) {
            None => default,
            Some("true" | "1" | "yes" | "on") => true,
            Some("false" | "0" | "no" | "off") => false,
            Some(s) => return Err(Error::config(format!("cannot parse {key} = {s:?} as a boolean"))),
        };
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        let v = self.raw(key).unwrap_or(default).to_string();
        self.record(key, v.clone());
        v
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr + ToString + Clone>(&self, key: &str, default: &[T]) -> Result<Vec<T>> {
        let v: Vec<T> = match self.raw(key) {
            None => default.to_vec(),
            Some(s) => s
                .split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::config(format!("cannot parse {key} item {x:?}")))
                })
                .collect::<Result<_>>()?,
        };
        let text: Vec<String> = v.iter().map(ToString::to_string).collect();
        self.record(key, text.join(","));
        Ok(v)
    }

    /// Fails on keys that no getter asked for.
    pub fn check_unused(&self) -> Result<()> {
        let used = self.lock();
        let unknown: Vec<&str> = self
            .given
            .keys()
            .filter(|k| !used.contains_key(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    /// Every key read so far with its effective value.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        self.lock().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let text = "seed = 3 # global\n[decode]\nL = 64\n[train]\nL = 9\n";
        let m = parse_config(text, "decode").unwrap();
        assert_eq!(m["seed"], "3");
        assert_eq!(m["L"], "64");
        assert!(parse_config("oops\n", "x").is_err());
    }

    #[test]
    fn defaults_are_recorded() {
        let mut c = RunConfig::from_map(BTreeMap::new());
        c.set("k", "5");
        assert_eq!(c.get("k", 1usize).unwrap(), 5);
        assert_eq!(c.get("j", 2.5f64).unwrap(), 2.5);
        assert_eq!(c.get_list("v", &[1usize, 2]).unwrap(), vec![1, 2]);
        assert_eq!(c.get_opt::<f64>("rho").unwrap(), None);
        let r = c.resolved();
        assert_eq!(r["j"], "2.5");
        assert_eq!(r["v"], "1,2");
        c.check_unused().unwrap();
        c.set("typo", "1");
        assert!(c.check_unused().is_err());
    }
}
