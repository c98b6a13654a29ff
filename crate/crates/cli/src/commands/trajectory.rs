//! Experiments over training trajectories: `trajectory`, `partial`,
//! `instability` and `landscape`.

use std::collections::BTreeMap;

use permalign_core::align::{fixed_points, partial_perm, MatchMethod, PartialMode};
use permalign_core::connectivity::{
    bootstrap_threshold, instability as child_instability, landscape_projection, BarrierCurve, CrossParent, LandscapeOptions,
};
use permalign_core::model::{apply_permutation, build_mlp_spec, NetworkParams, Permutation};
use permalign_core::train::{train as train_run, TrainRun};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::experiment::{
    align, load_checkpoint, method_name, read_match_options, replicate_config, save_run, seeds, Eval, EvalKeys, PairSource,
    ROLE_A, ROLE_B,
};
use crate::jobs::run_indexed;
use crate::manifest::Manifest;
use crate::output::{hash_file, OutDir, Provenance, Table};
use crate::Ctx;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PermSource {
    End,
    PerEpoch,
    Fixed,
}

impl std::str::FromStr for PermSource {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "end" => Ok(Self::End),
            "per_epoch" => Ok(Self::PerEpoch),
            "fixed" => Ok(Self::Fixed),
            _ => Err(()),
        }
    }
}

fn check_grids(a: &TrainRun, b: &TrainRun) -> Result<()> {
    if a.epochs() != b.epochs() {
        return Err(CliError::invalid(format!(
            "mismatched checkpoint grids: {:?} vs {:?}",
            a.epochs(),
            b.epochs()
        )));
    }
    if a.config.arch != b.config.arch {
        return Err(CliError::invalid("runs have different architectures"));
    }
    Ok(())
}

fn save_pair(out: &OutDir, seed: u64, a: &TrainRun, b: &TrainRun) -> Result<()> {
    save_run(out, &format!("seed-{seed}/run-a"), a)?;
    save_run(out, &format!("seed-{seed}/run-b"), b)
}

/// Barrier between `A_t` and `P[B_t]` at every checkpoint epoch, for each
/// requested permutation source and method, next to the unpermuted pair.
pub fn trajectory(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let source = PairSource::read(&mut f, "0,1,2");
    let eval_keys = EvalKeys::read(&mut f, true);
    let methods: Vec<MatchMethod> = f.list("methods", "weight");
    let perm_sources: Vec<PermSource> = f.list("perm_source", "end");
    let fixed_epoch: Option<usize> = if perm_sources.contains(&PermSource::Fixed) {
        f.required("fixed_epoch")
    } else {
        None
    };
    let options = read_match_options(&mut f);
    let save_runs = f.get("save_runs", false);
    let resolved = f.finish()?;
    let source = source.expect("validated");
    let eval = eval_keys.load()?;
    let seeds = source.seeds();

    let tables = run_indexed(seeds.len(), ctx.jobs, |i| {
        let seed = seeds[i];
        let (ra, rb) = source.pair(seed, eval.train(), None)?;
        check_grids(&ra, &rb)?;
        let spec = build_mlp_spec(&ra.config.arch);
        let epochs = ra.epochs();
        let final_a = &ra.final_checkpoint().params;
        let final_b = &rb.final_checkpoint().params;

        let mut barriers = Table::new(&["epoch", "perm", "split"], &["barrier_loss", "barrier_error"]);
        let mut fps = Table::new(&["epoch", "method"], &["fp_fraction_vs_end"]);
        // (label, permutation per epoch index)
        let mut sources: Vec<(String, Vec<Permutation>)> = Vec::new();
        for &method in &methods {
            let name = method_name(method);
            let p_end = align(method, final_a, final_b, &spec, Some(eval.train()), &options)?.permutation;
            for &ps in &perm_sources {
                let perms = match ps {
                    PermSource::End => vec![p_end.clone(); epochs.len()],
                    PermSource::Fixed => {
                        let t = fixed_epoch.expect("validated");
                        let p = align(method, &ra.at_epoch(t)?.params, &rb.at_epoch(t)?.params, &spec, Some(eval.train()), &options)?;
                        vec![p.permutation; epochs.len()]
                    }
                    PermSource::PerEpoch => {
                        let mut v = Vec::new();
                        for (ca, cb) in ra.checkpoints.iter().zip(&rb.checkpoints) {
                            let p = align(method, &ca.params, &cb.params, &spec, Some(eval.train()), &options)?.permutation;
                            fps.push(vec![ca.epoch.to_string(), name.into()], seed, vec![fixed_points(&p, &p_end)?.1]);
                            v.push(p);
                        }
                        v
                    }
                };
                let label = match ps {
                    PermSource::End => format!("{name}_end"),
                    PermSource::PerEpoch => format!("{name}_per_epoch"),
                    PermSource::Fixed => format!("{name}_fixed{}", fixed_epoch.expect("validated")),
                };
                sources.push((label, perms));
            }
        }
        for (j, (ca, cb)) in ra.checkpoints.iter().zip(&rb.checkpoints).enumerate() {
            let t = ca.epoch.to_string();
            let curve = eval.barrier(&ca.params, &cb.params)?;
            Eval::push_barrier(&mut barriers, &[t.clone(), "none".into()], seed, &curve);
            for (label, perms) in &sources {
                let aligned = apply_permutation(&cb.params, &spec, &perms[j])?;
                let curve = eval.barrier(&ca.params, &aligned)?;
                Eval::push_barrier(&mut barriers, &[t.clone(), label.clone()], seed, &curve);
            }
        }
        if save_runs {
            save_pair(&ctx.out, seed, &ra, &rb)?;
        }
        Ok((barriers, fps))
    })?;

    let mut barriers = Table::new(&["epoch", "perm", "split"], &["barrier_loss", "barrier_error"]);
    let mut fps = Table::new(&["epoch", "method"], &["fp_fraction_vs_end"]);
    for (b, p) in tables {
        barriers.extend(b);
        fps.extend(p);
    }
    barriers.write(&ctx.out, "trajectory")?;
    if !fps.is_empty() {
        fps.write(&ctx.out, "fixed_points")?;
    }
    let mut inputs: BTreeMap<String, String> = eval.input_hashes().into_iter().collect();
    inputs.extend(source.input_hashes()?);
    let prov = Provenance {
        command: "trajectory",
        resolved,
        train_config: source.train_config().cloned(),
        inputs,
    };
    let results = json!({ "trajectory": barriers.to_json(), "fixed_points": fps.to_json() });
    ctx.out.write_json("summary.json", &prov.summary(results))
}

/// End-of-training barriers under permutations mixing `P_t` and `P_end`
/// group by group, for every rewind epoch `t`.
pub fn partial(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let source = PairSource::read(&mut f, "0,1,2");
    let eval_keys = EvalKeys::read(&mut f, true);
    let method: MatchMethod = f.get_with("method", MatchMethod::Weight, "weight");
    let modes: Vec<PartialMode> = f.list("modes", "bottom_up,top_down,put_in,leave_out");
    let rewind: Option<Vec<usize>> = if f.mentions("at_epochs") { Some(f.list("at_epochs", "")) } else { None };
    let options = read_match_options(&mut f);
    let save_runs = f.get("save_runs", false);
    let resolved = f.finish()?;
    let source = source.expect("validated");
    let eval = eval_keys.load()?;
    let seeds = source.seeds();

    let tables = run_indexed(seeds.len(), ctx.jobs, |i| {
        let seed = seeds[i];
        let (ra, rb) = source.pair(seed, eval.train(), rewind.as_deref())?;
        check_grids(&ra, &rb)?;
        let spec = build_mlp_spec(&ra.config.arch);
        let n_groups = spec.n_groups();
        let final_a = &ra.final_checkpoint().params;
        let final_b = &rb.final_checkpoint().params;
        let p_end = align(method, final_a, final_b, &spec, Some(eval.train()), &options)?.permutation;
        let times = rewind.clone().unwrap_or_else(|| ra.epochs());

        let mut cache: Vec<(Permutation, BarrierCurve)> = Vec::new();
        let mut barrier_under = |p: &Permutation| -> Result<BarrierCurve> {
            if let Some((_, c)) = cache.iter().find(|(q, _)| q == p) {
                return Ok(c.clone());
            }
            let c = eval.barrier(final_a, &apply_permutation(final_b, &spec, p)?)?;
            cache.push((p.clone(), c.clone()));
            Ok(c)
        };
        let mut table = Table::new(&["epoch", "mode", "k", "split"], &["barrier_loss", "barrier_error"]);
        let none = Permutation::identity(&spec);
        for &t in &times {
            let ts = t.to_string();
            let p_t = align(method, &ra.at_epoch(t)?.params, &rb.at_epoch(t)?.params, &spec, Some(eval.train()), &options)?.permutation;
            for (label, p) in [("none", &none), ("p_end", &p_end), ("p_t", &p_t)] {
                let c = barrier_under(p)?;
                Eval::push_barrier(&mut table, &[ts.clone(), label.into(), "0".into()], seed, &c);
            }
            for &mode in &modes {
                let ks = match mode {
                    PartialMode::BottomUp | PartialMode::TopDown => 0..=n_groups,
                    PartialMode::PutIn | PartialMode::LeaveOut => 0..=n_groups.saturating_sub(1),
                };
                for k in ks {
                    let q = partial_perm(&p_t, &p_end, mode, k)?;
                    let c = barrier_under(&q)?;
                    Eval::push_barrier(&mut table, &[ts.clone(), mode.name().into(), k.to_string()], seed, &c);
                }
            }
        }
        if save_runs {
            save_pair(&ctx.out, seed, &ra, &rb)?;
        }
        Ok(table)
    })?;

    let mut table = Table::new(&["epoch", "mode", "k", "split"], &["barrier_loss", "barrier_error"]);
    for t in tables {
        table.extend(t);
    }
    table.write(&ctx.out, "partial")?;
    let mut inputs: BTreeMap<String, String> = eval.input_hashes().into_iter().collect();
    inputs.extend(source.input_hashes()?);
    let prov = Provenance {
        command: "partial",
        resolved,
        train_config: source.train_config().cloned(),
        inputs,
    };
    ctx.out.write_json("summary.json", &prov.summary(json!({ "partial": table.to_json() })))
}

/// Error barriers between pairs of children spawned from a parent at each
/// spawn epoch with different minibatch orders.
pub fn instability(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let eval_keys = EvalKeys::read_single(&mut f);
    let base = f.train_config();
    let seeds = seeds(&mut f, "0,1,2");
    let spawn: Option<Vec<usize>> = if f.mentions("spawn_epochs") { Some(f.list("spawn_epochs", "")) } else { None };
    let child_seeds: Vec<u64> = f.list("child_seeds", "1,2");
    if child_seeds.len() != 2 {
        f.error("`child_seeds` must list exactly two seeds");
    }
    let cross = f.get("cross", false);
    let method: MatchMethod = f.get_with("method", MatchMethod::Weight, "weight");
    let options = read_match_options(&mut f);
    let resamples = f.get("bootstrap_resamples", 1000usize);
    if resamples < 2 {
        f.error("`bootstrap_resamples` must be at least 2");
    }
    let resolved = f.finish()?;
    let base = base.expect("validated");
    let spawn = spawn.unwrap_or_else(|| (0..=base.epochs).collect());
    if let Some(&e) = spawn.iter().find(|&&e| e > base.epochs) {
        return Err(CliError::invalid(format!("spawn epoch {e} is beyond {} epochs", base.epochs)));
    }
    let eval = eval_keys.load()?;
    let (split, test) = eval.primary();
    let split_name = split.name();

    let value_cols: &[&'static str] = if cross {
        &["child_barrier_error", "child_barrier_loss", "cross_barrier_error"]
    } else {
        &["child_barrier_error", "child_barrier_loss"]
    };
    let results = run_indexed(seeds.len(), ctx.jobs, |i| {
        let seed = seeds[i];
        let mut cfg_a = replicate_config(&base, seed, ROLE_A);
        cfg_a.checkpoint_epochs = spawn.iter().copied().collect();
        let parent_a = train_run(&cfg_a, eval.train(), None)?;
        let offset = seed.wrapping_mul(1000).wrapping_add(100);
        let cs = (
            base.data_order_seed.wrapping_add(offset).wrapping_add(child_seeds[0]),
            base.data_order_seed.wrapping_add(offset).wrapping_add(child_seeds[1]),
        );
        let parent_b = if cross {
            let mut cfg_b = replicate_config(&base, seed, ROLE_B);
            cfg_b.checkpoint_epochs = cfg_a.checkpoint_epochs.clone();
            Some((train_run(&cfg_b, eval.train(), None)?, cfg_b))
        } else {
            None
        };
        let spec = build_mlp_spec(&base.arch);
        let p_end = match &parent_b {
            Some((rb, _)) => Some(
                align(method, &parent_a.final_checkpoint().params, &rb.final_checkpoint().params, &spec, Some(eval.train()), &options)?
                    .permutation,
            ),
            None => None,
        };
        let mut table = Table::new(&["spawn_epoch"], value_cols);
        for &e in &spawn {
            let cross_parent = match (&parent_b, &p_end) {
                (Some((rb, cfg_b)), Some(p)) => Some(CrossParent {
                    checkpoint: rb.at_epoch(e)?,
                    config: cfg_b,
                    p_end: p,
                    spec: &spec,
                }),
                _ => None,
            };
            let r = child_instability(parent_a.at_epoch(e)?, &cfg_a, cs, eval.train(), test, None, cross_parent)?;
            let mut vals = vec![r.child_barrier, r.child_barrier_loss];
            if let Some(c) = r.cross_barrier_under_p {
                vals.push(c);
            }
            table.push(vec![e.to_string()], seed, vals);
        }
        let threshold = bootstrap_threshold(&parent_a.final_checkpoint().params, test, resamples, seed)?;
        Ok((table, threshold))
    })?;

    let mut table = Table::new(&["spawn_epoch"], value_cols);
    let mut thresholds = Vec::new();
    for (t, th) in results {
        table.extend(t);
        thresholds.push(th);
    }
    let threshold = thresholds.iter().sum::<f64>() / thresholds.len() as f64;
    let j = table.value_index("child_barrier_error");
    let onset = table
        .aggregate()
        .into_iter()
        .find(|a| a.mean[j] <= threshold)
        .map(|a| a.keys[0].parse::<usize>().expect("epoch key"));
    table.write(&ctx.out, "instability")?;
    let prov = Provenance {
        command: "instability",
        resolved,
        train_config: Some(base),
        inputs: eval.input_hashes().into_iter().collect(),
    };
    let results = json!({
        "split": split_name,
        "instability": table.to_json(),
        "threshold": threshold,
        "threshold_per_seed": thresholds,
        "onset_epoch": onset,
    });
    ctx.out.write_json("summary.json", &prov.summary(results))
}

/// Loss and error over the plane through three networks, with trajectory
/// checkpoints projected onto it.
pub fn landscape(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let explicit = f.mentions("ckpt_0") || f.mentions("ckpt_1") || f.mentions("ckpt_2");
    let anchors_paths = if explicit {
        Some([f.input_path("ckpt_0", true), f.input_path("ckpt_1", true), f.input_path("ckpt_2", true)])
    } else {
        None
    };
    let eval_keys = EvalKeys::read_single(&mut f);
    let (base, seed, method, options) = if explicit {
        (None, 0, MatchMethod::Weight, Default::default())
    } else {
        let base = f.train_config();
        let seed: u64 = f.get("seed", 0);
        let method: MatchMethod = f.get_with("method", MatchMethod::Weight, "weight");
        (base, seed, method, read_match_options(&mut f))
    };
    let grid: Vec<usize> = f.list("grid", "64,64");
    if grid.len() != 2 || grid.iter().any(|&g| g < 2) {
        f.error("`grid` must be two sizes, each at least 2");
    }
    let margin: f64 = f.get("margin", 0.2);
    let resolved = f.finish()?;
    let eval = eval_keys.load()?;
    let (_, data) = eval.primary();
    let lopts = LandscapeOptions {
        nx: grid[0],
        ny: grid[1],
        margin,
    };
    let mut inputs: BTreeMap<String, String> = eval.input_hashes().into_iter().collect();

    // Anchors and labelled points to project.
    let (anchors, points): ([NetworkParams; 3], Vec<(String, usize, NetworkParams)>) = match anchors_paths {
        Some([Some(p0), Some(p1), Some(p2)]) => {
            let mut anchors = Vec::new();
            for (i, p) in [p0, p1, p2].iter().enumerate() {
                inputs.insert(format!("ckpt_{i}"), hash_file(p)?);
                anchors.push(load_checkpoint(p)?.params);
            }
            let anchors: [NetworkParams; 3] = anchors.try_into().expect("three anchors");
            (anchors, Vec::new())
        }
        Some(_) => unreachable!("validated"),
        None => {
            let base = base.clone().expect("validated");
            let source = PairSource::Train {
                base,
                seeds: vec![seed],
            };
            let (ra, rb) = source.pair(seed, eval.train(), None)?;
            let spec = build_mlp_spec(&ra.config.arch);
            let a_end = ra.final_checkpoint().params.clone();
            let b_end = rb.final_checkpoint().params.clone();
            let p = align(method, &a_end, &b_end, &spec, Some(eval.train()), &options)?.permutation;
            let pb_end = apply_permutation(&b_end, &spec, &p)?;
            let mut points = Vec::new();
            for c in &ra.checkpoints {
                points.push(("a".to_string(), c.epoch, c.params.clone()));
            }
            for c in &rb.checkpoints {
                points.push(("b".to_string(), c.epoch, c.params.clone()));
            }
            for c in &rb.checkpoints {
                points.push(("pb".to_string(), c.epoch, apply_permutation(&c.params, &spec, &p)?));
            }
            ([a_end, b_end, pb_end], points)
        }
    };
    let trajectory: Vec<NetworkParams> = points.iter().map(|(_, _, p)| p.clone()).collect();
    let l = landscape_projection(&anchors[0], &anchors[1], &anchors[2], &lopts, data, &trajectory)?;
    ctx.out.write("grid.csv", l.grid_csv())?;
    let mut csv = String::from("kind,epoch,x,y\n");
    for (i, (x, y)) in l.anchors.iter().enumerate() {
        csv.push_str(&format!("anchor{i},,{x},{y}\n"));
    }
    for ((kind, epoch, _), (x, y)) in points.iter().zip(&l.projections) {
        csv.push_str(&format!("{kind},{epoch},{x},{y}\n"));
    }
    ctx.out.write("points.csv", csv)?;
    let min_loss = l.loss.iter().copied().fold(f64::INFINITY, f64::min);
    let prov = Provenance {
        command: "landscape",
        resolved,
        train_config: base,
        inputs,
    };
    let results = json!({
        "split": eval.primary().0.name(),
        "anchors": l.anchors,
        "nx": lopts.nx,
        "ny": lopts.ny,
        "min_loss": min_loss,
    });
    ctx.out.write_json("summary.json", &prov.summary(results))
}
