//! Training recipe and its flat `key=value` file format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::hash::Hasher;
use std::str::FromStr;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchitectureSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Named optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One epoch of warmup to 0.1, weight decay 5e-4.
    Standard,
    /// No warmup, peak 1e-3, weight decay 1e-4.
    NoWarmupLowLr,
    /// One epoch of warmup to 0.1, no weight decay.
    WarmupNoWd,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::NoWarmupLowLr => "no_warmup_low_lr",
            Regime::WarmupNoWd => "warmup_no_wd",
        }
    }

    /// `(warmup_epochs, peak_lr, weight_decay)`.
    pub fn preset(self) -> (usize, f64, f64) {
        match self {
            Regime::Standard => (1, 0.1, 5e-4),
            Regime::NoWarmupLowLr => (0, 1e-3, 1e-4),
            Regime::WarmupNoWd => (1, 1e-1, 0.0),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Regime::Standard),
            "no_warmup_low_lr" => Ok(Regime::NoWarmupLowLr),
            "warmup_no_wd" => Ok(Regime::WarmupNoWd),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchitectureSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub init_seed: u64,
    pub data_order_seed: u64,
    pub checkpoint_epochs: BTreeSet<usize>,
    pub regime: Regime,
}

impl Default for TrainConfig {
    /// 784-512-512-10 MLP, batch 128, 20 epochs, standard regime.
    fn default() -> Self {
        let regime = Regime::Standard;
        let (warmup_epochs, peak_lr, weight_decay) = regime.preset();
        Self {
            arch: ArchitectureSpec::mlp(784, &[512, 512], 10).expect("valid"),
            epochs: 20,
            batch_size: 128,
            peak_lr,
            warmup_epochs,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay,
            init_seed: 0,
            data_order_seed: 0,
            checkpoint_epochs: BTreeSet::new(),
            regime,
        }
    }
}

/// Every key [`TrainConfig::from_map`] accepts.
pub const CONFIG_KEYS: &[&str] = &[
    "input_dim",
    "hidden_dims",
    "output_dim",
    "layer_norm",
    "epochs",
    "batch_size",
    "peak_lr",
    "warmup_epochs",
    "schedule",
    "momentum",
    "weight_decay",
    "init_seed",
    "data_order_seed",
    "checkpoint_epochs",
    "regime",
];

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_value(key, x)).collect()
}

/// Splits `key=value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
        let k = k.trim().to_string();
        if map.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", lineno + 1)));
        }
    }
    Ok(map)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup_epochs exceeds epochs".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(&e) = self.checkpoint_epochs.iter().next_back() {
            if e > self.epochs {
                return Err(Error::Config(format!("checkpoint epoch {e} beyond {} epochs", self.epochs)));
            }
        }
        Ok(())
    }

    /// Sets the regime and its warmup, peak learning rate and weight decay.
    pub fn with_regime(mut self, regime: Regime) -> Self {
        let (warmup, lr, wd) = regime.preset();
        self.regime = regime;
        self.warmup_epochs = warmup.min(self.epochs);
        self.peak_lr = lr;
        self.weight_decay = wd;
        self
    }

    /// Parses the `key=value` format. A `regime` key applies its preset
    /// first; explicit keys then override it. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let map = parse_key_values(text)?;
        Self::from_map(&map)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let mut cfg = TrainConfig::default();
        let get = |k: &str| map.get(k).map(String::as_str);
        if let Some(v) = get("epochs") {
            cfg.epochs = parse_value("epochs", v)?;
        }
        if let Some(v) = get("regime") {
            cfg = cfg.with_regime(v.parse()?);
        }
        let mut arch = cfg.arch.clone();
        if let Some(v) = get("input_dim") {
            arch.input_dim = parse_value("input_dim", v)?;
        }
        if let Some(v) = get("hidden_dims") {
            arch.hidden_dims = parse_list("hidden_dims", v)?;
        }
        if let Some(v) = get("output_dim") {
            arch.output_dim = parse_value("output_dim", v)?;
        }
        if let Some(v) = get("layer_norm") {
            arch.use_layer_norm = parse_value("layer_norm", v)?;
        }
        cfg.arch = arch;
        if let Some(v) = get("batch_size") {
            cfg.batch_size = parse_value("batch_size", v)?;
        }
        if let Some(v) = get("peak_lr") {
            cfg.peak_lr = parse_value("peak_lr", v)?;
        }
        if let Some(v) = get("warmup_epochs") {
            cfg.warmup_epochs = parse_value("warmup_epochs", v)?;
        }
        if let Some(v) = get("schedule") {
            cfg.schedule = v.parse()?;
        }
        if let Some(v) = get("momentum") {
            cfg.momentum = parse_value("momentum", v)?;
        }
        if let Some(v) = get("weight_decay") {
            cfg.weight_decay = parse_value("weight_decay", v)?;
        }
        if let Some(v) = get("init_seed") {
            cfg.init_seed = parse_value("init_seed", v)?;
        }
        if let Some(v) = get("data_order_seed") {
            cfg.data_order_seed = parse_value("data_order_seed", v)?;
        }
        if let Some(v) = get("checkpoint_epochs") {
            cfg.checkpoint_epochs = if v.trim() == "all" {
                (0..=cfg.epochs).collect()
            } else {
                parse_list("checkpoint_epochs", v)?.into_iter().collect()
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let list = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "input_dim={}", self.arch.input_dim);
        let _ = writeln!(s, "hidden_dims={}", list(&mut self.arch.hidden_dims.iter().copied()));
        let _ = writeln!(s, "output_dim={}", self.arch.output_dim);
        let _ = writeln!(s, "layer_norm={}", self.arch.use_layer_norm);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "peak_lr={:?}", self.peak_lr);
        let _ = writeln!(s, "warmup_epochs={}", self.warmup_epochs);
        let _ = writeln!(
            s,
            "schedule={}",
            match self.schedule {
                Schedule::Cosine => "cosine",
                Schedule::Constant => "constant",
            }
        );
        let _ = writeln!(s, "momentum={:?}", self.momentum);
        let _ = writeln!(s, "weight_decay={:?}", self.weight_decay);
        let _ = writeln!(s, "init_seed={}", self.init_seed);
        let _ = writeln!(s, "data_order_seed={}", self.data_order_seed);
        let _ = writeln!(s, "checkpoint_epochs={}", list(&mut self.checkpoint_epochs.iter().copied()));
        let _ = writeln!(s, "regime={}", self.regime.name());
        s
    }

    /// FNV-1a of [`Self::to_text`].
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.to_text().as_bytes());
        h.finish()
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil(self.batch_size).max(1)
    }

    /// Learning rate for the 0-based global step: linear warmup from 0 over
    /// `warmup_epochs`, then cosine annealing to 0 (or constant).
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warmup = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warmup {
            return self.peak_lr * (step + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.peak_lr,
            Schedule::Cosine => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}
