//! Result files. Everything written here is a deterministic function of the
//! inputs; wall-clock times go only to the `run.log` sidecar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fnv::FnvHasher;
use permalign_core::data::Dataset;
use permalign_core::train::{parse_key_values, TrainConfig};
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::manifest::Resolved;

pub fn fnv_hex(bytes: &[u8]) -> String {
    let mut h = FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    Ok(fnv_hex(&bytes))
}

/// Hash of a directory's regular files, visited in name order.
pub fn hash_dir(path: &Path) -> Result<String> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| CliError::io(format!("listing {}", path.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut h = FnvHasher::default();
    for p in names {
        h.write(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
        h.write(hash_file(&p)?.as_bytes());
    }
    Ok(format!("{:016x}", h.finish()))
}

pub fn hash_dataset(data: &Dataset) -> String {
    let mut h = FnvHasher::default();
    for x in data.features() {
        h.write(&x.to_le_bytes());
    }
    for &y in data.labels() {
        h.write(&(y as u64).to_le_bytes());
    }
    format!("{:016x}", h.finish())
}

pub fn config_map(cfg: &TrainConfig) -> BTreeMap<String, String> {
    parse_key_values(&cfg.to_text()).expect("to_text parses")
}

/// An output directory plus its timestamped sidecar log.
pub struct OutDir {
    root: PathBuf,
    log: String,
}

impl OutDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| CliError::invalid(format!("output directory {}: {e}", root.display())))?;
        let mut out = Self { root, log: String::new() };
        out.log("start");
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::io(format!("writing {}", p.display()), e))
    }

    pub fn write_json(&self, rel: &str, value: &Value) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
        text.push('\n');
        self.write(rel, text)
    }

    pub fn log(&mut self, msg: &str) {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let _ = writeln!(self.log, "{}.{:03} {msg}", t.as_secs(), t.subsec_millis());
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.log("done");
        let log = std::mem::take(&mut self.log);
        self.write("run.log", log)?;
        Ok(self.root)
    }
}

/// Provenance block shared by every summary.
pub struct Provenance {
    pub command: &'static str,
    pub resolved: Resolved,
    pub train_config: Option<TrainConfig>,
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn summary(&self, results: Value) -> Value {
        json!({
            "command": self.command,
            "config": self.resolved,
            "train_config": self.train_config.as_ref().map(config_map),
            "input_hashes": self.inputs,
            "results": results,
        })
    }
}

#[derive(Clone, Debug)]
struct Row {
    keys: Vec<String>,
    seed: u64,
    values: Vec<f64>,
}

/// Per-replicate rows keyed by string columns, with mean and sample
/// standard deviation across seeds for every key combination.
#[derive(Clone, Debug)]
pub struct Table {
    key_cols: Vec<&'static str>,
    value_cols: Vec<&'static str>,
    rows: Vec<Row>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub keys: Vec<String>,
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Table {
    pub fn new(key_cols: &[&'static str], value_cols: &[&'static str]) -> Self {
        Self {
            key_cols: key_cols.to_vec(),
            value_cols: value_cols.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, keys: Vec<String>, seed: u64, values: Vec<f64>) {
        assert_eq!(keys.len(), self.key_cols.len(), "key arity");
        assert_eq!(values.len(), self.value_cols.len(), "value arity");
        self.rows.push(Row { keys, seed, values });
    }

    pub fn extend(&mut self, other: Table) {
        assert_eq!((&self.key_cols, &self.value_cols), (&other.key_cols, &other.value_cols));
        self.rows.extend(other.rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn value_index(&self, col: &str) -> usize {
        self.value_cols.iter().position(|c| *c == col).unwrap_or_else(|| panic!("no column {col}"))
    }

    /// Groups in order of first appearance.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut groups: Vec<(Vec<String>, Vec<&Row>)> = Vec::new();
        for r in &self.rows {
            match groups.iter_mut().find(|(k, _)| *k == r.keys) {
                Some((_, members)) => members.push(r),
                None => groups.push((r.keys.clone(), vec![r])),
            }
        }
        groups
            .into_iter()
            .map(|(keys, members)| {
                let n = members.len();
                let (mut mean, mut std) = (Vec::new(), Vec::new());
                for j in 0..self.value_cols.len() {
                    let xs: Vec<f64> = members.iter().map(|r| r.values[j]).collect();
                    let (m, s) = mean_std(&xs);
                    mean.push(m);
                    std.push(s);
                }
                Aggregate { keys, n, mean, std }
            })
            .collect()
    }

    /// Mean of `col` over the rows whose keys equal `keys`.
    pub fn mean_where(&self, keys: &[&str], col: &str) -> Option<f64> {
        let j = self.value_index(col);
        self.aggregate()
            .into_iter()
            .find(|a| a.keys.iter().map(String::as_str).eq(keys.iter().copied()))
            .map(|a| a.mean[j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.key_cols.join(",");
        out.push_str(",seed,");
        out.push_str(&self.value_cols.join(","));
        out.push('\n');
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{},{},{}", r.keys.join(","), r.seed, vals.join(","));
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = self.key_cols.join(",");
        out.push_str(",n");
        for c in &self.value_cols {
            let _ = write!(out, ",{c}_mean,{c}_std");
        }
        out.push('\n');
        for a in self.aggregate() {
            out.push_str(&a.keys.join(","));
            let _ = write!(out, ",{}", a.n);
            for (m, s) in a.mean.iter().zip(&a.std) {
                let _ = write!(out, ",{m},{s}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut obj = serde_json::Map::new();
                for (k, v) in self.key_cols.iter().zip(&r.keys) {
                    obj.insert(k.to_string(), json!(v));
                }
                obj.insert("seed".into(), json!(r.seed));
                for (k, v) in self.value_cols.iter().zip(&r.values) {
                    obj.insert(k.to_string(), json!(v));
                }
                Value::Object(obj)
            })
            .collect();
        let aggregate: Vec<Value> = self
            .aggregate()
            .into_iter()
            .map(|a| {
                let mut obj = serde_json::Map::new();
                for (k, v) in self.key_cols.iter().zip(&a.keys) {
                    obj.insert(k.to_string(), json!(v));
                }
                obj.insert("n".into(), json!(a.n));
                for (j, k) in self.value_cols.iter().enumerate() {
                    obj.insert(format!("{k}_mean"), json!(a.mean[j]));
                    obj.insert(format!("{k}_std"), json!(a.std[j]));
                }
                Value::Object(obj)
            })
            .collect();
        json!({ "rows": rows, "mean_std": aggregate })
    }

    /// Writes `<stem>.csv` and `<stem>_mean.csv`.
    pub fn write(&self, out: &OutDir, stem: &str) -> Result<()> {
        out.write(&format!("{stem}.csv"), self.to_csv())?;
        out.write(&format!("{stem}_mean.csv"), self.aggregate_csv())
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregates_by_key() {
        let mut t = Table::new(&["split"], &["barrier"]);
        t.push(vec!["test".into()], 0, vec![1.0]);
        t.push(vec!["train".into()], 0, vec![5.0]);
        t.push(vec!["test".into()], 1, vec![3.0]);
        let agg = t.aggregate();
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].keys, vec!["test".to_string()]);
        assert_eq!(agg[0].mean, vec![2.0]);
        assert!((agg[0].std[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg[1].std, vec![0.0]);
        assert_eq!(t.mean_where(&["test"], "barrier"), Some(2.0));
        assert_eq!(t.to_csv(), "split,seed,barrier\ntest,0,1\ntrain,0,5\ntest,1,3\n");
        assert!(t.aggregate_csv().starts_with("split,n,barrier_mean,barrier_std\ntest,2,2,"));
    }

    #[test]
    fn fnv_reference_vector() {
        // FNV-1a 64 of "a".
        assert_eq!(fnv_hex(b"a"), "af63dc4c8601ec8c");
    }
}
