//! Experiment manifests: flat `key=value` files holding the training recipe
//! and the experiment's own keys.
//!
//! Values are pulled through [`Fields`], which records every problem it
//! meets instead of stopping at the first, and remembers the effective value
//! of every key so summaries can embed the resolved configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use permalign_core::train::{parse_key_values, TrainConfig, CONFIG_KEYS};

use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct Manifest {
    values: BTreeMap<String, String>,
    /// Relative input paths resolve against this directory.
    base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        Ok(Self {
            values: parse_key_values(text)?,
            base_dir: base_dir.into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn fields(&self) -> Fields<'_> {
        Fields {
            manifest: self,
            used: BTreeSet::new(),
            errors: Vec::new(),
            resolved: BTreeMap::new(),
        }
    }
}

/// Typed, error-collecting access to a manifest.
pub struct Fields<'a> {
    manifest: &'a Manifest,
    used: BTreeSet<String>,
    errors: Vec<String>,
    resolved: BTreeMap<String, String>,
}

/// Effective values of every experiment key, as text.
pub type Resolved = BTreeMap<String, String>;

impl Fields<'_> {
    fn raw(&mut self, key: &str) -> Option<&str> {
        self.used.insert(key.to_string());
        self.manifest.get(key).map(str::trim)
    }

    /// Whether the manifest sets `key` at all.
    pub fn mentions(&self, key: &str) -> bool {
        self.manifest.get(key).is_some()
    }

    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    fn parse_one<T: FromStr>(&mut self, key: &str, v: &str) -> Option<T> {
        match v.parse() {
            Ok(x) => Some(x),
            Err(_) => {
                self.errors.push(format!("bad value for `{key}`: {v:?}"));
                None
            }
        }
    }

    pub fn optional<T: FromStr>(&mut self, key: &str) -> Option<T> {
        let v = self.raw(key)?.to_string();
        let parsed = self.parse_one(key, &v)?;
        self.resolved.insert(key.to_string(), v);
        Some(parsed)
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> T {
        match self.raw(key).map(str::to_string) {
            Some(v) => {
                let parsed = self.parse_one(key, &v).unwrap_or(default);
                self.resolved.insert(key.to_string(), v);
                parsed
            }
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                default
            }
        }
    }

    /// [`Self::get`] for types without `Display`; `default_text` is what
    /// the resolved configuration records.
    pub fn get_with<T: FromStr>(&mut self, key: &str, default: T, default_text: &str) -> T {
        match self.optional(key) {
            Some(v) => v,
            None => {
                if self.manifest.get(key).is_none() {
                    self.resolved.insert(key.to_string(), default_text.to_string());
                }
                default
            }
        }
    }

    pub fn required<T: FromStr>(&mut self, key: &str) -> Option<T> {
        if self.manifest.get(key).is_none() {
            self.used.insert(key.to_string());
            self.errors.push(format!("missing required key `{key}`"));
            return None;
        }
        self.optional(key)
    }

    /// Comma-separated list; `default` is used when the key is absent.
    pub fn list<T: FromStr>(&mut self, key: &str, default: &str) -> Vec<T> {
        let text = self.raw(key).unwrap_or(default).to_string();
        self.resolved.insert(key.to_string(), text.clone());
        let mut out = Vec::new();
        for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            if let Some(x) = self.parse_one(key, item) {
                out.push(x);
            }
        }
        if out.is_empty() {
            self.errors.push(format!("`{key}` must list at least one value"));
        }
        out
    }

    /// An input file or directory that must exist, relative to the manifest.
    pub fn input_path(&mut self, key: &str, required: bool) -> Option<PathBuf> {
        let v = match self.raw(key) {
            Some(v) => v.to_string(),
            None => {
                if required {
                    self.errors.push(format!("missing required input `{key}`"));
                }
                return None;
            }
        };
        let path = self.manifest.base_dir.join(&v);
        if !path.exists() {
            self.errors.push(format!("input `{key}` not found: {}", path.display()));
            return None;
        }
        self.resolved.insert(key.to_string(), v);
        Some(path)
    }

    /// The training recipe assembled from the training keys present.
    pub fn train_config(&mut self) -> Option<TrainConfig> {
        let mut map = BTreeMap::new();
        for &k in CONFIG_KEYS {
            if let Some(v) = self.raw(k) {
                map.insert(k.to_string(), v.to_string());
            }
        }
        match TrainConfig::from_map(&map) {
            Ok(cfg) => Some(cfg),
            Err(e) => {
                self.errors.push(e.to_string());
                None
            }
        }
    }

    /// Fails with every collected problem, plus any key nobody asked for.
    pub fn finish(self) -> Result<Resolved> {
        let mut errors = self.errors;
        for k in self.manifest.values.keys() {
            if !self.used.contains(k) {
                errors.push(format!("unknown key `{k}` for this command"));
            }
        }
        if errors.is_empty() {
            Ok(self.resolved)
        } else {
            Err(CliError::Validation(errors))
        }
    }
}
