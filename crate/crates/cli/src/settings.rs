//! Plain-text `key = value` configuration, merged with command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Bad input from the user: exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn normalize_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

/// Ordered key-value settings. Later layers overwrite earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let mut s = Settings::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!("config line {}: expected `key = value`, got {line:?}", n + 1)));
            };
            if k.trim().is_empty() {
                return Err(usage(format!("config line {}: empty key", n + 1)));
            }
            s.set(k, v.trim());
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(normalize_key(key), value.into());
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, v.to_string());
        }
    }

    /// Applies `KEY=VALUE` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> anyhow::Result<()> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {p:?}")))?;
            self.set(k, v.trim());
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Settings) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    /// Copy without the given keys.
    pub fn without(&self, keys: &[&str]) -> Settings {
        let mut s = self.clone();
        for k in keys {
            s.values.remove(*k);
        }
        s
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> anyhow::Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| usage(format!("bad value for {key}: {v:?} ({e})"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> anyhow::Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require(&self, key: &str) -> anyhow::Result<&str> {
        self.raw(key).ok_or_else(|| usage(format!("missing required setting `{key}`")))
    }

    /// Comma-separated floats.
    pub fn floats(&self, key: &str) -> anyhow::Result<Option<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|e| usage(format!("bad value for {key}: {x:?} ({e})"))))
                .collect::<anyhow::Result<Vec<_>>>()
                .map(Some),
        }
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut s = Settings::parse("# run\nepochs = 10\nlearning-rate=0.5 # inline\n\n").unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), Some(10));
        assert_eq!(s.get::<f64>("learning_rate").unwrap(), Some(0.5));
        s.apply_overrides(&["epochs=20".into()]).unwrap();
        assert_eq!(s.get::<usize>("epochs").unwrap(), Some(20));
        assert_eq!(Settings::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn errors_are_usage_errors() {
        let e = Settings::parse("epochs 10").unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        let s = Settings::parse("epochs = ten").unwrap();
        assert!(s.get::<usize>("epochs").unwrap_err().downcast_ref::<UsageError>().is_some());
        assert_eq!(Settings::parse("a = 1, 2.5").unwrap().floats("a").unwrap(), Some(vec![1.0, 2.5]));
    }
}
