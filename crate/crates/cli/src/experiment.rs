//! Pieces shared by the subcommands: replicate seeding, data and
//! evaluation splits, matching options, and run directories.

use std::path::{Path, PathBuf};

use permalign_core::align::{activation_match, weight_match, MatchMethod, MatchOptions, MatchReport, DEFAULT_MAX_SWEEPS};
use permalign_core::connectivity::{barrier_curve, BarrierCurve, DEFAULT_N_ALPHA, MAX_EVAL_EXAMPLES};
use permalign_core::data::{DataBundle, Dataset, Split};
use permalign_core::model::{NetworkParams, PermutationSpec};
use permalign_core::train::{train as train_run, Checkpoint, TrainConfig, TrainRun};

use crate::error::{CliError, Result};
use crate::manifest::Fields;
use crate::output::{hash_dataset, hash_dir, OutDir, Table};

/// Offsets distinguishing the networks of one replicate.
pub const ROLE_A: u64 = 0;
pub const ROLE_B: u64 = 1;
pub const ROLE_C: u64 = 2;

/// Seeds of network `role` in replicate `seed`: both the init and the
/// minibatch-order seed move by `1000 * seed + role` from the base config.
pub fn replicate_config(base: &TrainConfig, seed: u64, role: u64) -> TrainConfig {
    let offset = seed.wrapping_mul(1000).wrapping_add(role);
    TrainConfig {
        init_seed: base.init_seed.wrapping_add(offset),
        data_order_seed: base.data_order_seed.wrapping_add(offset),
        ..base.clone()
    }
}

/// Dataset plus the evaluation subsets barrier curves are measured on.
pub struct Eval {
    pub uri: String,
    pub bundle: DataBundle,
    pub splits: Vec<Split>,
    sets: Vec<Dataset>,
    pub n_alpha: usize,
}

pub struct EvalKeys {
    uri: Option<String>,
    splits: Vec<String>,
    n_alpha: usize,
    eval_max: usize,
}

impl EvalKeys {
    /// `barriers` adds the `n_alpha` key.
    pub fn read(f: &mut Fields<'_>, barriers: bool) -> Self {
        let uri = f.required("data");
        let splits: Vec<String> = f.list("splits", "train,test");
        for s in &splits {
            if s != "train" && s != "test" {
                f.error(format!("unknown split {s:?} (expected train or test)"));
            }
        }
        let n_alpha = if barriers { f.get("n_alpha", DEFAULT_N_ALPHA) } else { DEFAULT_N_ALPHA };
        if n_alpha < 2 {
            f.error("`n_alpha` must be at least 2");
        }
        let eval_max = f.get("eval_max", MAX_EVAL_EXAMPLES);
        if eval_max == 0 {
            f.error("`eval_max` must be positive");
        }
        Self {
            uri,
            splits,
            n_alpha,
            eval_max,
        }
    }

    /// `data`, `eval_max` and a single `split` (default test) for commands
    /// that evaluate on one split.
    pub fn read_single(f: &mut Fields<'_>) -> Self {
        let uri = f.required("data");
        let split: String = f.get("split", "test".to_string());
        if split != "train" && split != "test" {
            f.error(format!("unknown split {split:?} (expected train or test)"));
        }
        let eval_max = f.get("eval_max", MAX_EVAL_EXAMPLES);
        if eval_max == 0 {
            f.error("`eval_max` must be positive");
        }
        Self {
            uri,
            splits: vec![split],
            n_alpha: DEFAULT_N_ALPHA,
            eval_max,
        }
    }

    pub fn load(self) -> Result<Eval> {
        let uri = self.uri.expect("validated");
        let bundle = DataBundle::load(&uri)?;
        let mut splits = Vec::new();
        let mut sets = Vec::new();
        for s in ["train", "test"] {
            if self.splits.iter().any(|x| x == s) {
                let (split, data) = if s == "train" {
                    (Split::Train, &bundle.train)
                } else {
                    (Split::Test, &bundle.test)
                };
                splits.push(split);
                sets.push(data.head(self.eval_max));
            }
        }
        Ok(Eval {
            uri,
            bundle,
            splits,
            sets,
            n_alpha: self.n_alpha,
        })
    }
}

impl Eval {
    pub fn train(&self) -> &Dataset {
        &self.bundle.train
    }

    pub fn eval_set(&self, split: Split) -> Option<&Dataset> {
        self.splits.iter().position(|s| *s == split).map(|i| &self.sets[i])
    }

    /// The first requested evaluation split.
    pub fn primary(&self) -> (Split, &Dataset) {
        (self.splits[0], &self.sets[0])
    }

    pub fn barrier(&self, a: &NetworkParams, b: &NetworkParams) -> Result<BarrierCurve> {
        let refs: Vec<&Dataset> = self.sets.iter().collect();
        Ok(barrier_curve(a, b, &refs, self.n_alpha)?)
    }

    /// One row per split: `(split, [barrier_loss, barrier_error])`.
    pub fn barrier_rows(curve: &BarrierCurve) -> Vec<(String, Vec<f64>)> {
        curve
            .splits
            .iter()
            .map(|c| (c.split.name().to_string(), vec![c.barrier_loss, c.barrier_error]))
            .collect()
    }

    pub fn input_hashes(&self) -> [(String, String); 2] {
        [
            (format!("data:{}:train", self.uri), hash_dataset(&self.bundle.train)),
            (format!("data:{}:test", self.uri), hash_dataset(&self.bundle.test)),
        ]
    }

    /// A barrier-table with `keys` followed by `split`.
    pub fn push_barrier(table: &mut Table, keys: &[String], seed: u64, curve: &BarrierCurve) {
        for (split, vals) in Self::barrier_rows(curve) {
            let mut k = keys.to_vec();
            k.push(split);
            table.push(k, seed, vals);
        }
    }
}

pub fn read_match_options(f: &mut Fields<'_>) -> MatchOptions {
    let max_sweeps = f.get("max_sweeps", DEFAULT_MAX_SWEEPS);
    if max_sweeps == 0 {
        f.error("`max_sweeps` must be at least 1");
    }
    MatchOptions {
        seed: f.get("match_seed", 0u64),
        max_sweeps,
        include_bias_norm: f.get("include_bias_norm", true),
    }
}

pub fn method_name(m: MatchMethod) -> &'static str {
    match m {
        MatchMethod::Weight => "weight",
        MatchMethod::Activation => "activation",
    }
}

/// `P` with `P[b] ≈ a`. Activation matching reads statistics from `train`,
/// which weight matching ignores.
pub fn align(
    method: MatchMethod,
    a: &NetworkParams,
    b: &NetworkParams,
    spec: &PermutationSpec,
    train: Option<&Dataset>,
    options: &MatchOptions,
) -> Result<MatchReport> {
    Ok(match (method, train) {
        (MatchMethod::Weight, _) => weight_match(a, b, spec, options, None, None)?,
        (MatchMethod::Activation, Some(data)) => activation_match(a, b, spec, data)?,
        (MatchMethod::Activation, None) => return Err(CliError::invalid("activation matching needs data")),
    })
}

pub fn seeds(f: &mut Fields<'_>, default: &str) -> Vec<u64> {
    let s: Vec<u64> = f.list("seeds", default);
    let mut sorted = s.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != s.len() {
        f.error("`seeds` contains duplicates");
    }
    s
}

/// Where the A/B network pairs of an experiment come from: two saved run
/// directories (`run_a`, `run_b`; a single replicate) or fresh training
/// from the manifest's recipe, one pair per seed.
pub enum PairSource {
    Runs { a: PathBuf, b: PathBuf },
    Train { base: TrainConfig, seeds: Vec<u64> },
}

impl PairSource {
    pub fn read(f: &mut Fields<'_>, default_seeds: &str) -> Option<Self> {
        let a = f.input_path("run_a", false);
        let b = f.input_path("run_b", false);
        match (a, b) {
            (Some(a), Some(b)) => Some(PairSource::Runs { a, b }),
            (None, None) if f.mentions("run_a") || f.mentions("run_b") => None,
            (None, None) => {
                let base = f.train_config();
                let seeds = seeds(f, default_seeds);
                base.map(|base| PairSource::Train { base, seeds })
            }
            _ => {
                f.error("`run_a` and `run_b` must be given together");
                None
            }
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            PairSource::Runs { .. } => vec![0],
            PairSource::Train { seeds, .. } => seeds.clone(),
        }
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        match self {
            PairSource::Runs { .. } => None,
            PairSource::Train { base, .. } => Some(base),
        }
    }

    /// The pair for replicate `seed`. Fresh runs keep a checkpoint at every
    /// epoch in `keep`, or at every epoch when `keep` is `None`.
    pub fn pair(&self, seed: u64, train: &Dataset, keep: Option<&[usize]>) -> Result<(TrainRun, TrainRun)> {
        match self {
            PairSource::Runs { a, b } => Ok((load_run(a)?, load_run(b)?)),
            PairSource::Train { base, .. } => {
                let mut base = base.clone();
                base.checkpoint_epochs = match keep {
                    None => (0..=base.epochs).collect(),
                    Some(k) => k.iter().copied().filter(|&e| e <= base.epochs).collect(),
                };
                let ra = train_run(&replicate_config(&base, seed, ROLE_A), train, None)?;
                let rb = train_run(&replicate_config(&base, seed, ROLE_B), train, None)?;
                Ok((ra, rb))
            }
        }
    }

    pub fn input_hashes(&self) -> Result<Vec<(String, String)>> {
        match self {
            PairSource::Runs { a, b } => Ok(vec![("run_a".into(), hash_dir(a)?), ("run_b".into(), hash_dir(b)?)]),
            PairSource::Train { .. } => Ok(Vec::new()),
        }
    }
}

fn checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.pmlc")
}

/// Writes `config.txt` and one container per checkpoint under `dir`.
pub fn save_run(out: &OutDir, dir: &str, run: &TrainRun) -> Result<()> {
    out.write(&format!("{dir}/config.txt"), run.config.to_text())?;
    for c in &run.checkpoints {
        out.write(&format!("{dir}/{}", checkpoint_name(c.epoch)), c.to_bytes()?)?;
    }
    Ok(())
}

/// Reads a directory written by [`save_run`].
pub fn load_run(dir: &Path) -> Result<TrainRun> {
    let cfg_path = dir.join("config.txt");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| CliError::io(format!("reading {}", cfg_path.display()), e))?;
    let config = TrainConfig::parse(&text)?;
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("epoch-") && name.ends_with(".pmlc")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::invalid(format!("run directory {} has no checkpoints", dir.display())));
    }
    let checkpoints = files.iter().map(Checkpoint::load).collect::<Result<Vec<_>, _>>()?;
    Ok(TrainRun { config, checkpoints })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replicate_seeds_are_distinct() {
        let base = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for seed in 0..3 {
            for role in [ROLE_A, ROLE_B, ROLE_C] {
                let c = replicate_config(&base, seed, role);
                assert_eq!(c.init_seed, 1000 * seed + role);
                assert_eq!(c.data_order_seed, c.init_seed);
                assert!(seen.insert(c.init_seed));
            }
        }
    }
}
