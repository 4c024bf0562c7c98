//! Run configuration: optional TOML file of `key = value` pairs, overridden
//! by command-line flags. Keys are the long flag names with `-` replaced by
//! `_`. The fully resolved configuration is written next to the outputs.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, Default)]
pub struct Resolver {
    file: toml::Table,
    used: Vec<String>,
    resolved: toml::Table,
}

impl Resolver {
    pub fn new(file: toml::Table) -> Self {
        Resolver { file, ..Resolver::default() }
    }

    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Resolver::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::validation(format!("{}: {}", path.display(), e.message())))?;
        Ok(Resolver::new(table))
    }

    fn config_value<T: DeserializeOwned>(&mut self, key: &str) -> Result<Option<T>, CliError> {
        let Some(v) = self.file.get(key) else { return Ok(None) };
        self.used.push(key.to_string());
        // Integers are accepted where reals are expected.
        let v = match v {
            toml::Value::Integer(i) if std::any::type_name::<T>() == "f64" => toml::Value::Float(*i as f64),
            other => other.clone(),
        };
        v.try_into().map(Some).map_err(|e| CliError::validation(format!("config key '{key}': {}", e.message())))
    }

    fn record<T: Serialize>(&mut self, key: &str, v: &T) {
        if let Ok(val) = toml::Value::try_from(v) {
            self.resolved.insert(key.to_string(), val);
        }
    }

    /// Flag, else config file, else `default`.
    pub fn get<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        let from_file = self.config_value(key)?;
        let v = flag.or(from_file).unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    /// As [`get`](Self::get) without a default; absent values are not recorded.
    pub fn opt<T: DeserializeOwned + Serialize>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        let from_file = self.config_value(key)?;
        let v = flag.or(from_file);
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    /// Records a value that is not configurable from the file.
    pub fn note<T: Serialize>(&mut self, key: &str, v: &T) {
        self.record(key, v);
    }

    /// Fails on config keys no option consumed.
    pub fn check_unused(&self) -> Result<(), CliError> {
        let unknown: Vec<&String> = self.file.keys().filter(|k| !self.used.contains(k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::validation(format!("unknown config keys: {unknown:?}")))
        }
    }

    pub fn resolved(&self) -> &toml::Table {
        &self.resolved
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(RESOLVED_CONFIG);
        let text = toml::to_string(&self.resolved).map_err(|e| CliError::validation(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let mut r = Resolver::new("alpha = 0.01\nmin_instances = 50\nclusters = 3".parse().unwrap());
        assert_eq!(r.get("alpha", None, 0.05).unwrap(), 0.01);
        assert_eq!(r.get("min_instances", Some(7usize), 256).unwrap(), 7);
        assert_eq!(r.get("epochs", None, 100usize).unwrap(), 100);
        assert!(r.check_unused().is_err());
        assert_eq!(r.get("clusters", None, 2usize).unwrap(), 3);
        r.check_unused().unwrap();
        assert_eq!(r.resolved()["min_instances"].as_integer(), Some(7));
    }

    #[test]
    fn integer_is_accepted_for_real() {
        let mut r = Resolver::new("step = 1".parse().unwrap());
        assert_eq!(r.get("step", None, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn wrong_type_is_a_validation_error() {
        let mut r = Resolver::new("epochs = \"many\"".parse().unwrap());
        let e = r.get("epochs", None, 1usize).unwrap_err();
        assert!(e.message.contains("epochs"));
    }
}
