//! Plain `key = value` config files. Unknown keys are rejected; values from
//! the command line always win.

use std::collections::HashMap;

use gradflow::{Error, Result};

const KNOWN_KEYS: &[&str] = &[
    "solver",
    "problem",
    "rtol",
    "atol",
    "dt",
    "seed",
    "paths",
    "output",
    "reproducible",
];

pub struct FileConfig {
    values: HashMap<String, String>,
}

impl FileConfig {
    pub fn empty() -> Self {
        Self {
            values: HashMap::new(),
        }
    }

    pub fn load(path: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{path}': {e}")))?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config '{path}' line {}: expected `key = value`",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "config '{path}' line {}: unknown key '{key}' (known: {})",
                    lineno + 1,
                    KNOWN_KEYS.join(", ")
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get_str(&self, key: &str, flag: &Option<String>, default: &str) -> String {
        flag.clone()
            .or_else(|| self.values.get(key).cloned())
            .unwrap_or_else(|| default.to_string())
    }

    pub fn get_f64(&self, key: &str, flag: Option<f64>, default: f64) -> Result<f64> {
        match flag {
            Some(v) => Ok(v),
            None => match self.values.get(key) {
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::Config(format!("config key '{key}': bad number '{s}'"))),
                None => Ok(default),
            },
        }
    }

    pub fn get_u64(&self, key: &str, flag: Option<u64>, default: u64) -> Result<u64> {
        match flag {
            Some(v) => Ok(v),
            None => match self.values.get(key) {
                Some(s) => s
                    .parse()
                    .map_err(|_| Error::Config(format!("config key '{key}': bad integer '{s}'"))),
                None => Ok(default),
            },
        }
    }

    pub fn get_usize(&self, key: &str, flag: Option<usize>, default: usize) -> Result<usize> {
        Ok(self.get_u64(key, flag.map(|v| v as u64), default as u64)? as usize)
    }

    pub fn get_output(&self, flag: &Option<String>) -> Option<String> {
        flag.clone().or_else(|| self.values.get("output").cloned())
    }

    pub fn get_reproducible(&self, flag: bool) -> bool {
        if flag {
            return true;
        }
        matches!(
            self.values.get("reproducible").map(|s| s.as_str()),
            Some("true") | Some("1") | Some("yes")
        )
    }
}
