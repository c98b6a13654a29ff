//! End-to-end runs of every subcommand on a tiny problem.

use std::path::Path;
use std::process::Command as Process;

use permalign_cli::{run, Command, Manifest};
use permalign_core::model::{apply_permutation, build_mlp_spec, Permutation};
use permalign_core::train::Checkpoint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::{csv_rows, go, summary, value, TINY};

#[test]
fn train_writes_checkpoints_and_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = go(Command::Train, "seeds=0,1\ncheckpoint_epochs=1\n", tmp.path());
    for seed in [0, 1] {
        for epoch in ["0001", "0003"] {
            assert!(dir.join(format!("run-{seed}/epoch-{epoch}.pmlc")).is_file());
        }
        assert!(dir.join(format!("run-{seed}/config.txt")).is_file());
    }
    assert!(dir.join("run.log").is_file());
    let rows = csv_rows(&dir.join("final_eval.csv"));
    // Two seeds times two splits.
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| value(r, "accuracy") > 0.8));
    let s = summary(&dir);
    assert_eq!(s["command"], "train");
    assert_eq!(s["config"]["seeds"], "0,1");
    assert_eq!(s["train_config"]["epochs"], "3");
    let hashes = s["input_hashes"].as_object().unwrap();
    assert!(hashes.keys().any(|k| k.starts_with("data:synth://") && k.ends_with(":train")));
}

#[test]
fn zero_epochs_gives_single_init_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let m = Manifest::parse(&TINY.replace("epochs=3", "epochs=0").replace("warmup_epochs=1", "warmup_epochs=0"), Path::new(".")).unwrap();
    let dir = run(Command::Train, &m, 1, tmp.path()).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.join("run-0")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 2);
    assert!(dir.join("run-0/epoch-0000.pmlc").is_file());
}

#[test]
fn match_recovers_self_and_constructed_permutations() {
    let tmp = tempfile::tempdir().unwrap();
    // One hidden layer: weight matching is then a single exact assignment.
    let one_layer = "hidden_dims=16\n";
    let m = Manifest::parse(&TINY.replace("hidden_dims=16,16\n", one_layer), Path::new(".")).unwrap();
    let train_dir = run(Command::Train, &m, 1, &tmp.path().join("train")).unwrap();
    let ckpt = train_dir.join("run-0/epoch-0003.pmlc");

    let self_cfg = format!("ckpt_a={0}\nckpt_b={0}\n", ckpt.display());
    let m = Manifest::parse(&self_cfg, Path::new(".")).unwrap();
    let dir = run(Command::Match, &m, 1, &tmp.path().join("self")).unwrap();
    let report = summary(&dir)["results"].clone();
    assert_eq!(report["is_identity"], true);
    assert_eq!(report["l2_after"], 0.0);

    let a = Checkpoint::load(&ckpt).unwrap();
    let spec = build_mlp_spec(a.params.arch());
    let pi = Permutation::random(&spec, &mut ChaCha8Rng::seed_from_u64(9));
    let mut b = a.clone();
    b.params = apply_permutation(&a.params, &spec, &pi).unwrap();
    let b_path = tmp.path().join("b.pmlc");
    b.save(&b_path).unwrap();
    let cfg = format!("ckpt_a={}\nckpt_b={}\n", ckpt.display(), b_path.display());
    let dir = run(Command::Match, &Manifest::parse(&cfg, Path::new(".")).unwrap(), 1, &tmp.path().join("recover")).unwrap();
    let text = std::fs::read_to_string(dir.join("perm.txt")).unwrap();
    assert_eq!(Permutation::from_text(&text, &spec).unwrap(), pi.invert());
    let sweeps: Vec<f64> = serde_json::from_value(summary(&dir)["results"]["similarity_per_sweep"].clone()).unwrap();
    assert!(sweeps.windows(2).all(|w| w[1] >= w[0]));

    // The recovered permutation removes the barrier the construction added.
    let cfg = format!("{cfg}perm={}\ndata=synth://blobs?n=300&d=12&classes=3&sep=4&seed=1&test=90\n", dir.join("perm.txt").display());
    let dir = run(Command::Barrier, &Manifest::parse(&cfg, Path::new(".")).unwrap(), 1, &tmp.path().join("barrier")).unwrap();
    let r = &summary(&dir)["results"];
    assert_eq!(r["barrier_loss_test"], 0.0);
    assert_eq!(r["barrier_error_train"], 0.0);
}

#[test]
fn trajectory_of_a_run_with_itself_is_flat() {
    let tmp = tempfile::tempdir().unwrap();
    let train_dir = go(Command::Train, "checkpoint_epochs=0,1,2\n", &tmp.path().join("train"));
    let run_dir = train_dir.join("run-0");
    let cfg = format!(
        "data=synth://blobs?n=300&d=12&classes=3&sep=4&seed=1&test=90\nrun_a={0}\nrun_b={0}\nperm_source=end,per_epoch,fixed\nfixed_epoch=0\nn_alpha=5\n",
        run_dir.display()
    );
    let dir = run(Command::Trajectory, &Manifest::parse(&cfg, Path::new(".")).unwrap(), 1, &tmp.path().join("t")).unwrap();
    let rows = csv_rows(&dir.join("trajectory.csv"));
    // 4 epochs x (none + three sources) x 2 splits.
    assert_eq!(rows.len(), 32);
    assert!(rows.iter().all(|r| value(r, "barrier_loss") == 0.0 && value(r, "barrier_error") == 0.0));
    assert!(dir.join("fixed_points.csv").is_file());
}

#[test]
fn trajectory_from_recipe_reduces_final_barrier() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = go(Command::Trajectory, "seeds=0\nsplits=test\nn_alpha=5\nsave_runs=true\n", tmp.path());
    assert!(dir.join("seed-0/run-a/epoch-0003.pmlc").is_file());
    let rows = csv_rows(&dir.join("trajectory.csv"));
    let at = |perm: &str| rows.iter().find(|r| r["epoch"] == "3" && r["perm"] == perm).map(|r| value(r, "barrier_loss")).unwrap();
    assert!(at("weight_end") <= at("none"));
    assert!(dir.join("trajectory_mean.csv").is_file());
}

#[test]
fn partial_bottom_up_zero_equals_p_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = go(Command::Partial, "seeds=0\nmodes=bottom_up,top_down\nat_epochs=1\nn_alpha=5\n", tmp.path());
    let rows = csv_rows(&dir.join("partial.csv"));
    for split in ["train", "test"] {
        let find = |mode: &str, k: &str| {
            rows.iter()
                .find(|r| r["mode"] == mode && r["k"] == k && r["split"] == split)
                .unwrap_or_else(|| panic!("{mode} {k}"))
                .clone()
        };
        let (p_end, bu0) = (find("p_end", "0"), find("bottom_up", "0"));
        assert_eq!(p_end["barrier_loss"], bu0["barrier_loss"]);
        assert_eq!(p_end["barrier_error"], bu0["barrier_error"]);
        // Taking P_t for every group is P_t itself.
        let (p_t, bu2) = (find("p_t", "0"), find("bottom_up", "2"));
        assert_eq!(p_t["barrier_loss"], bu2["barrier_loss"]);
    }
}

#[test]
fn prune_align_at_zero_fraction_is_plain_matching() {
    let tmp = tempfile::tempdir().unwrap();
    let traj = go(Command::Trajectory, "seeds=0\nn_alpha=5\n", &tmp.path().join("t"));
    let dir = go(Command::PruneAlign, "seeds=0\nfractions=0,0.5\nn_alpha=5\n", &tmp.path().join("p"));
    let plain = csv_rows(&traj.join("trajectory.csv"));
    let pruned = csv_rows(&dir.join("prune_align.csv"));
    assert_eq!(pruned.len(), 2 * 2 * 2);
    for split in ["train", "test"] {
        let want = plain.iter().find(|r| r["epoch"] == "3" && r["perm"] == "weight_end" && r["split"] == split).unwrap();
        for pruning in ["magnitude", "random"] {
            let got = pruned.iter().find(|r| r["fraction"] == "0" && r["pruning"] == pruning && r["split"] == split).unwrap();
            assert_eq!(got["barrier_loss"], want["barrier_loss"]);
            assert_eq!(got["dense_barrier_error"], want["barrier_error"]);
        }
    }
}

#[test]
fn imp_and_transport_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = go(Command::Imp, "levels=2\nrewind_epoch=1\n", &tmp.path().join("imp"));
    let rows = csv_rows(&dir.join("imp.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(value(&rows[0], "density"), 1.0);
    assert!(value(&rows[2], "density") < value(&rows[1], "density"));
    assert!(dir.join("seed-0/mask-level-02.pmsk").is_file());
    assert!(dir.join("seed-0/rewind.pmlc").is_file());

    let dir = go(Command::Transport, "seeds=0\nlevels=1\nrewind_epoch=1\n", &tmp.path().join("transport"));
    let rows = csv_rows(&dir.join("transport.csv"));
    assert_eq!(rows.len(), 2);
    for col in ["permuted_accuracy", "naive_accuracy", "one_shot_accuracy", "imp_a_accuracy"] {
        assert!((0.0..=1.0).contains(&value(&rows[1], col)));
    }
}

#[test]
fn triplet_instability_and_landscape_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = go(Command::Triplet, "seeds=0\nwidths=8,16\n", &tmp.path().join("triplet"));
    let rows = csv_rows(&dir.join("triplet.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&value(r, "fp_fraction"))));

    let dir = go(Command::Instability, "seeds=0\nspawn_epochs=0,3\nbootstrap_resamples=50\n", &tmp.path().join("inst"));
    let rows = csv_rows(&dir.join("instability.csv"));
    assert_eq!(rows.len(), 2);
    // Children spawned at the final epoch are the parent itself.
    let last = rows.iter().find(|r| r["spawn_epoch"] == "3").unwrap();
    assert_eq!(value(last, "child_barrier_error"), 0.0);
    assert!(summary(&dir)["results"]["threshold"].as_f64().unwrap() >= 0.0);

    let dir = go(Command::Landscape, "grid=5,4\n", &tmp.path().join("land"));
    let grid = csv_rows(&dir.join("grid.csv"));
    assert_eq!(grid.len(), 20);
    assert!(dir.join("points.csv").is_file());
}

#[test]
fn every_subcommand_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, diff) in common::rerun_all(tmp.path()) {
        assert!(diff.is_none(), "{cmd}: {}", diff.unwrap());
    }
}

fn binary(args: &[&str]) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_permalign")).args(args).output().unwrap()
}

#[test]
fn validation_errors_exit_2_and_list_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "ckpt_a=missing.pmlc\nmethod=telepathy\nbogus=1\n").unwrap();
    let out = binary(&["match", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    for needle in ["ckpt_a", "ckpt_b", "method", "bogus"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }

    std::fs::write(&cfg, format!("{TINY}epochs=x\n")).unwrap();
    let out = binary(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o2").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hot.cfg");
    std::fs::write(&cfg, TINY.replace("peak_lr=0.05", "peak_lr=1e6")).unwrap();
    let out = binary(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn binary_prints_output_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ok.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out_dir = tmp.path().join("o");
    let out = binary(&["train", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), out_dir.to_str().unwrap());
}
