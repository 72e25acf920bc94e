//! Run configuration: built-in defaults, then a `key = value` file, then
//! command-line flags, then `ECRC_<KEY>` environment variables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::Invalid;

/// Every recognized key with its default value.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("threads", "1"),
    ("variant", "graph-node-edge"),
    ("epochs", "200"),
    ("batch_size", "32"),
    ("lr", "0.001"),
    ("dropout", "0.5"),
    ("optimizer", "adam"),
    ("hidden", "128,128"),
    ("split", "8:2"),
    ("sentence_source", "hash"),
    ("sentence_file", ""),
    ("bilm_model", ""),
    ("bilm_trainable", "false"),
    ("word_source", "hash"),
    ("word_file", ""),
    ("hash_seed", "0"),
    ("sentence_dim", "auto"),
    ("word_dim", "auto"),
    ("max_len", "30"),
    ("labels", ""),
    ("pos_tags", ""),
    ("bilm_layers", "1"),
    ("bilm_dim", "16"),
    ("bilm_steps", "200"),
    ("bilm_lr", "0.5"),
    ("synth_conversations", "80"),
    ("synth_utterances", "5"),
];

/// Keys that may change how fast a run goes but never what it produces.
const EXCLUDED_FROM_ARTIFACTS: &[&str] = &["threads"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    pub fn defaults() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Merges the layers in precedence order. `env` is passed in so that
    /// tests can supply their own environment.
    pub fn resolve(
        file: Option<&Path>,
        flags: &[(&str, Option<String>)],
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, Invalid> {
        let mut cfg = Self::defaults();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_file(&text, &path.display().to_string())?;
        }
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for (key, _) in KEYS {
            if let Some(v) = env(&format!("ECRC_{}", key.to_uppercase())) {
                cfg.set(key, &v)?;
            }
        }
        Ok(cfg)
    }

    pub fn apply_file(&mut self, text: &str, context: &str) -> Result<(), Invalid> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Invalid(format!("{context}:{}: expected `key = value`", lineno + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Invalid(format!("{context}:{}: {}", lineno + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Invalid> {
        if !known(key) {
            return Err(Invalid(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        debug_assert!(known(key), "{key}");
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Invalid>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| Invalid(format!("config {key} = {raw:?}: {e}")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>, Invalid> {
        self.raw(key)
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| Invalid(format!("config {key} must be a comma-separated list of sizes"))))
            .collect()
    }

    /// Entries embedded in artifacts.
    pub fn artifact_entries(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .filter(|(k, _)| !EXCLUDED_FROM_ARTIFACTS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// `# key = value` lines for artifact headers.
    pub fn header(&self, command: &str) -> String {
        let mut out = format!("# ecrc {command}\n");
        for (k, v) in self.artifact_entries() {
            let _ = writeln!(out, "# {k} = {v}");
        }
        out
    }

    /// Full effective configuration, printed at startup.
    pub fn describe(&self) -> String {
        let mut out = String::from("effective config:\n");
        for (k, v) in &self.values {
            let _ = writeln!(out, "  {k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_file_then_flags_then_env() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nseed = 5\nepochs = 3\nlr = 0.1\n").unwrap();
        let flags = [("epochs", Some("7".to_string())), ("lr", Some("0.2".to_string())), ("dropout", None)];
        let env = |k: &str| (k == "ECRC_LR").then(|| "0.3".to_string());
        let cfg = RunConfig::resolve(Some(&path), &flags, env).unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 5);
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), 7);
        assert_eq!(cfg.get::<f64>("lr").unwrap(), 0.3);
        assert_eq!(cfg.get::<f64>("dropout").unwrap(), 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::defaults();
        assert!(cfg.apply_file("colour = blue\n", "f").is_err());
        assert!(cfg.apply_file("just text\n", "f").is_err());
        assert!(cfg.set("seed", "x").is_ok());
        assert!(cfg.get::<u64>("seed").is_err());
    }

    #[test]
    fn threads_stay_out_of_artifacts() {
        let mut cfg = RunConfig::defaults();
        cfg.set("threads", "4").unwrap();
        assert!(!cfg.header("train").contains("threads"));
        assert!(cfg.describe().contains("threads = 4"));
        assert_eq!(cfg.list("hidden").unwrap(), vec![128, 128]);
    }
}
