//! Effective run settings: built-in defaults, then a `key = value` config
//! file, then command-line flags, later layers winning. The merged result
//! is echoed into every report so a run can be reproduced from its output.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;

use crate::CliError;

pub struct Settings {
    values: BTreeMap<&'static str, String>,
    /// Keys that are legal but have no default (must come from file/flag).
    optional: Vec<&'static str>,
}

impl Settings {
    pub fn new(defaults: &[(&'static str, &str)], optional: &[&'static str]) -> Self {
        Settings {
            values: defaults.iter().map(|(k, v)| (*k, v.to_string())).collect(),
            optional: optional.to_vec(),
        }
    }

    fn known(&self, key: &str) -> Option<&'static str> {
        self.values
            .keys()
            .copied()
            .find(|k| *k == key)
            .or_else(|| self.optional.iter().copied().find(|k| *k == key))
    }

    /// Merge a config file. Lines are `key = value`; blank lines and `#`
    /// comments are skipped. Unknown keys are a usage error.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let known = self.known(key).ok_or_else(|| {
                CliError::Usage(format!("{}:{}: unknown key `{key}`", path.display(), lineno + 1))
            })?;
            self.values.insert(known, value.trim().to_string());
        }
        Ok(())
    }

    /// Apply one flag value on top (flags beat the config file).
    pub fn set<T: Display>(&mut self, key: &'static str, value: Option<T>) {
        if let Some(v) = value {
            assert!(self.known(key).is_some(), "flag key {key} was never declared");
            self.values.insert(key, v.to_string());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Usage(format!("missing required setting `{key}`")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T, CliError> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| CliError::Usage(format!("setting `{key}` wants {what}, got `{raw}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parsed(key, "an unsigned integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parsed(key, "an unsigned integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        self.parsed(key, "a number")
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        self.parsed(key, "true or false")
    }

    /// Every effective setting, sorted by key, for report provenance.
    pub fn echo(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (*k as &str, v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_defaults_then_file_then_flags() {
        let dir = std::env::temp_dir().join(format!("ggnn-settings-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.conf");
        fs::write(&path, "# comment\nseed = 9\nepochs = 12\n").unwrap();

        let mut s = Settings::new(&[("seed", "0"), ("epochs", "5"), ("task", "x")], &[]);
        s.load_file(&path).unwrap();
        s.set("epochs", Some(20));
        assert_eq!(s.u64("seed").unwrap(), 9);
        assert_eq!(s.usize("epochs").unwrap(), 20);
        assert_eq!(s.get("task"), Some("x"));
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let dir = std::env::temp_dir().join(format!("ggnn-settings-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.conf");
        fs::write(&path, "mystery = 1\n").unwrap();

        let mut s = Settings::new(&[("seed", "0")], &[]);
        assert!(matches!(s.load_file(&path), Err(CliError::Usage(_))));

        let s = Settings::new(&[("seed", "banana")], &[]);
        assert!(matches!(s.u64("seed"), Err(CliError::Usage(_))));
        fs::remove_dir_all(&dir).ok();
    }
}
