//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use permalign_cli::{run, Command, Manifest};
use serde_json::Value;

pub const TINY: &str = "\
data=synth://blobs?n=300&d=12&classes=3&sep=4&seed=1&test=90
input_dim=12
hidden_dims=16,16
output_dim=3
epochs=3
batch_size=32
peak_lr=0.05
warmup_epochs=1
";

pub fn manifest(extra: &str) -> Manifest {
    Manifest::parse(&format!("{TINY}{extra}"), Path::new(".")).unwrap()
}

pub fn go(command: Command, extra: &str, out: &Path) -> PathBuf {
    run(command, &manifest(extra), 1, out).unwrap_or_else(|e| panic!("{}: {e}", command.name()))
}

pub fn summary(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

/// Every output file except the timestamped log, keyed by relative path.
pub fn outputs(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file() && e.file_name() != "run.log")
        .map(|e| (e.path().strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(e.path()).unwrap()))
        .collect()
}

/// Rows of a CSV as maps from column name to value.
pub fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

pub fn value(row: &BTreeMap<String, String>, col: &str) -> f64 {
    row[col].parse().unwrap()
}


/// Small manifests covering every subcommand that trains or evaluates.
pub const RERUN_CASES: &[(Command, &str)] = &[
    (Command::Train, "seeds=0,1\ncheckpoint_epochs=1\n"),
    (Command::Trajectory, "seeds=0\nn_alpha=5\nsave_runs=true\nperm_source=end,per_epoch\nmethods=weight,activation\n"),
    (Command::Partial, "seeds=0\nat_epochs=1\nn_alpha=5\n"),
    (Command::Imp, "levels=2\nrewind_epoch=1\n"),
    (Command::Transport, "seeds=0\nlevels=1\nrewind_epoch=1\n"),
    (Command::Triplet, "seeds=0\nwidths=8\n"),
    (Command::PruneAlign, "seeds=0\nfractions=0,0.5\nn_alpha=5\n"),
    (Command::Instability, "seeds=0\nspawn_epochs=1\nbootstrap_resamples=20\n"),
    (Command::Landscape, "grid=4,4\n"),
];

/// First difference between two output trees, if any.
pub fn diff_outputs(a: &Path, b: &Path) -> Option<String> {
    let (x, y) = (outputs(a), outputs(b));
    if x.is_empty() {
        return Some("no outputs".into());
    }
    if x.keys().ne(y.keys()) {
        return Some("different file sets".into());
    }
    x.iter().find(|(k, v)| y[*k] != **v).map(|(k, _)| format!("{} differs", k.display()))
}

/// Runs every case twice, the second time with two job slots, then runs
/// `match` and `barrier` twice on a trained checkpoint. Returns each
/// command with its first difference.
pub fn rerun_all(root: &Path) -> Vec<(&'static str, Option<String>)> {
    let mut results = Vec::new();
    for (i, &(cmd, extra)) in RERUN_CASES.iter().enumerate() {
        let a = go(cmd, extra, &root.join(format!("{i}-a")));
        let b = run(cmd, &manifest(extra), 2, &root.join(format!("{i}-b"))).unwrap();
        results.push((cmd.name(), diff_outputs(&a, &b)));
    }
    let ckpts = go(Command::Train, "seeds=0,1\n", &root.join("ckpts"));
    let pair = format!(
        "ckpt_a={}\nckpt_b={}\n",
        ckpts.join("run-0/epoch-0003.pmlc").display(),
        ckpts.join("run-1/epoch-0003.pmlc").display()
    );
    let data = TINY.lines().next().unwrap();
    for (cmd, text) in [(Command::Match, pair.clone()), (Command::Barrier, format!("{pair}{data}\nn_alpha=7\n"))] {
        let m = Manifest::parse(&text, Path::new(".")).unwrap();
        let a = run(cmd, &m, 1, &root.join(format!("{}-a", cmd.name()))).unwrap();
        let b = run(cmd, &m, 1, &root.join(format!("{}-b", cmd.name()))).unwrap();
        results.push((cmd.name(), diff_outputs(&a, &b)));
    }
    results
}
