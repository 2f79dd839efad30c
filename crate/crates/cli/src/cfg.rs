//! Optional key-value configuration file. Flags take precedence: a value from
//! the file only applies where the corresponding flag was not given.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// `key=value` lines; `#` comments and blank lines ignored.
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut values = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            match trimmed.split_once('=') {
                Some((k, v)) => {
                    values.insert(k.trim().to_string(), v.trim().to_string());
                }
                None => bail!("{}:{}: expected key=value", path.display(), idx + 1),
            }
        }
        Ok(ConfigFile { values })
    }

    /// Flag value if set, else the config-file value parsed as `T`, else the
    /// built-in default.
    pub fn resolve<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(raw) => raw
                .parse()
                .map_err(|_| anyhow::anyhow!("config key '{}': cannot parse '{}'", key, raw)),
            None => Ok(default),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }
}

/// Resolve a manifest path against `DIRECNET_DATA_ROOT` when the given path
/// is relative and does not exist as written.
pub fn resolve_data_path(path: &Path) -> std::path::PathBuf {
    if path.is_relative() && !path.exists() {
        if let Ok(root) = std::env::var("DIRECNET_DATA_ROOT") {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nlr=0.01\nbatch-size=16\n").unwrap();
        let cfg = ConfigFile::load(&path).unwrap();
        assert_eq!(cfg.resolve(Some(0.5f64), "lr", 1e-4).unwrap(), 0.5);
        assert_eq!(cfg.resolve(None::<f64>, "lr", 1e-4).unwrap(), 0.01);
        assert_eq!(cfg.resolve(None::<usize>, "batch-size", 32).unwrap(), 16);
        assert_eq!(cfg.resolve(None::<usize>, "epochs", 300).unwrap(), 300);
    }

    #[test]
    fn malformed_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "not a pair\n").unwrap();
        assert!(ConfigFile::load(&path).is_err());
    }
}
