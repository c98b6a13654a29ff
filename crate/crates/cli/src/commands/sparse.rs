//! Sparsity experiments: `imp`, `transport` and `prune-align`.

use std::collections::BTreeMap;

use permalign_core::align::{activation_match, weight_match, MatchMethod};
use permalign_core::model::{apply_permutation, build_mlp_spec};
use permalign_core::sparsity::{imp as imp_run, magnitude_prune, random_prune, transport_mask, ImpOptions, Mask, TransportSetup};
use permalign_core::train::{train as train_run, TrainConfig};
use serde_json::json;

use crate::error::Result;
use crate::experiment::{align, read_match_options, replicate_config, seeds, Eval, EvalKeys, PairSource, ROLE_A, ROLE_B};
use crate::jobs::run_indexed;
use crate::manifest::{Fields, Manifest};
use crate::output::{Provenance, Table};
use crate::Ctx;

/// `levels`, `rewind_epoch` (default a tenth of the epochs) and, when
/// `lr_rewind_key` is set, `lr_rewind`.
fn read_imp_options(f: &mut Fields<'_>, base: Option<&TrainConfig>, lr_rewind_key: bool) -> ImpOptions {
    let levels = f.get("levels", 5usize);
    let default_rewind = base.map_or(0, |b| b.epochs / 10);
    let rewind_epoch = f.get("rewind_epoch", default_rewind);
    if let Some(b) = base {
        if levels > 0 && rewind_epoch >= b.epochs {
            f.error(format!("`rewind_epoch` {rewind_epoch} must be below epochs {}", b.epochs));
        }
    }
    let lr_rewind = lr_rewind_key && f.get("lr_rewind", false);
    ImpOptions {
        levels,
        rewind_epoch,
        lr_rewind,
    }
}

fn run_id(prefix: &str, seed: u64, cfg: &TrainConfig) -> String {
    format!("{prefix}-seed{seed}-{:016x}", cfg.fingerprint())
}

/// Iterative magnitude pruning with rewinding, one run per seed.
pub fn imp(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let eval_keys = EvalKeys::read_single(&mut f);
    let base = f.train_config();
    let seeds = seeds(&mut f, "0");
    let options = read_imp_options(&mut f, base.as_ref(), true);
    let resolved = f.finish()?;
    let base = base.expect("validated");
    let eval = eval_keys.load()?;
    let (_, test) = eval.primary();

    let runs = run_indexed(seeds.len(), ctx.jobs, |i| {
        let seed = seeds[i];
        let cfg = replicate_config(&base, seed, ROLE_A);
        let run = imp_run(&cfg, eval.train(), test, &options)?;
        let id = run_id("imp", seed, &cfg);
        let mut table = Table::new(&["level"], &["density", "kept", "loss", "error", "accuracy"]);
        for lv in &run.levels {
            let dir = format!("seed-{seed}");
            ctx.out.write(&format!("{dir}/mask-level-{:02}.pmsk", lv.level), lv.mask.to_container(lv.level, &id).to_bytes()?)?;
            let mut ck = run.dense.final_checkpoint().clone();
            ck.params = lv.params.clone();
            ck.momentum = None;
            ctx.out.write(&format!("{dir}/level-{:02}.pmlc", lv.level), ck.to_bytes()?)?;
            table.push(
                vec![lv.level.to_string()],
                seed,
                vec![
                    lv.mask.density(),
                    lv.mask.kept() as f64,
                    lv.eval.mean_cross_entropy,
                    lv.eval.error_rate,
                    lv.eval.accuracy(),
                ],
            );
        }
        ctx.out.write(&format!("seed-{seed}/rewind.pmlc"), run.rewind.to_bytes()?)?;
        Ok(table)
    })?;

    let mut table = Table::new(&["level"], &["density", "kept", "loss", "error", "accuracy"]);
    for t in runs {
        table.extend(t);
    }
    table.write(&ctx.out, "imp")?;
    let prov = Provenance {
        command: "imp",
        resolved,
        train_config: Some(base),
        inputs: eval.input_hashes().into_iter().collect(),
    };
    ctx.out.write_json("summary.json", &prov.summary(json!({ "imp": table.to_json() })))
}

const TRANSPORT_COLS: &[&str] = &[
    "density",
    "permuted_accuracy",
    "naive_accuracy",
    "one_shot_accuracy",
    "imp_a_accuracy",
    "permuted_loss",
    "naive_loss",
    "one_shot_loss",
];

/// Moves A's IMP masks to B modulo the dense permutation and compares with
/// naive transport and one-shot pruning of B.
pub fn transport(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let eval_keys = EvalKeys::read_single(&mut f);
    let base = f.train_config();
    let seeds = seeds(&mut f, "0,1,2");
    let options = read_imp_options(&mut f, base.as_ref(), false);
    let method: MatchMethod = f.get_with("method", MatchMethod::Weight, "weight");
    let match_options = read_match_options(&mut f);
    let resolved = f.finish()?;
    let base = base.expect("validated");
    let eval = eval_keys.load()?;
    let (_, test) = eval.primary();

    let tables = run_indexed(seeds.len(), ctx.jobs, |i| {
        let seed = seeds[i];
        let cfg_a = replicate_config(&base, seed, ROLE_A);
        let imp_a = imp_run(&cfg_a, eval.train(), test, &options)?;
        let mut cfg_b = replicate_config(&base, seed, ROLE_B);
        cfg_b.checkpoint_epochs.insert(options.rewind_epoch);
        let run_b = train_run(&cfg_b, eval.train(), None)?;
        let spec = build_mlp_spec(&base.arch);
        let b_final = &run_b.final_checkpoint().params;
        let p_dense = align(method, &imp_a.levels[0].params, b_final, &spec, Some(eval.train()), &match_options)?.permutation;
        let setup = TransportSetup {
            spec: &spec,
            p_dense: &p_dense,
            b_rewind: run_b.at_epoch(options.rewind_epoch)?,
            b_final,
            config_b: &cfg_b,
            train_data: eval.train(),
            eval_data: test,
        };
        let mut table = Table::new(&["level"], TRANSPORT_COLS);
        for lv in &imp_a.levels {
            let r = transport_mask(&lv.mask, lv.level, &setup)?;
            table.push(
                vec![lv.level.to_string()],
                seed,
                vec![
                    r.density,
                    r.permuted.accuracy(),
                    r.naive.accuracy(),
                    r.one_shot.accuracy(),
                    lv.eval.accuracy(),
                    r.permuted.mean_cross_entropy,
                    r.naive.mean_cross_entropy,
                    r.one_shot.mean_cross_entropy,
                ],
            );
        }
        Ok(table)
    })?;

    let mut table = Table::new(&["level"], TRANSPORT_COLS);
    for t in tables {
        table.extend(t);
    }
    table.write(&ctx.out, "transport")?;
    let prov = Provenance {
        command: "transport",
        resolved,
        train_config: Some(base),
        inputs: eval.input_hashes().into_iter().collect(),
    };
    ctx.out.write_json("summary.json", &prov.summary(json!({ "transport": table.to_json() })))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pruning {
    Magnitude,
    Random,
}

impl std::str::FromStr for Pruning {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "random" => Ok(Self::Random),
            _ => Err(()),
        }
    }
}

impl Pruning {
    fn name(self) -> &'static str {
        match self {
            Pruning::Magnitude => "magnitude",
            Pruning::Random => "random",
        }
    }
}

/// Prunes both networks of a pair, aligns the pruned networks and measures
/// the barrier between the pruned A and the permuted pruned B. The barrier
/// of the dense pair under the same permutation is reported alongside.
pub fn prune_align(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let source = PairSource::read(&mut f, "0,1,2");
    let eval_keys = EvalKeys::read(&mut f, true);
    let fractions: Vec<f64> = f.list("fractions", "0,0.2,0.5,0.8");
    if fractions.iter().any(|x| !(0.0..1.0).contains(x)) {
        f.error("`fractions` must lie in [0, 1)");
    }
    let prunings: Vec<Pruning> = f.list("pruning", "magnitude,random");
    let checkpoint_epochs: Option<Vec<usize>> = if f.mentions("at_epochs") { Some(f.list("at_epochs", "")) } else { None };
    let method: MatchMethod = f.get_with("method", MatchMethod::Weight, "weight");
    let options = read_match_options(&mut f);
    let resolved = f.finish()?;
    let source = source.expect("validated");
    let eval = eval_keys.load()?;
    let seeds = source.seeds();
    let cols: &[&str] = &["barrier_loss", "barrier_error", "dense_barrier_loss", "dense_barrier_error"];

    let tables = run_indexed(seeds.len(), ctx.jobs, |i| {
        let seed = seeds[i];
        let (ra, rb) = source.pair(seed, eval.train(), Some(checkpoint_epochs.as_deref().unwrap_or(&[])))?;
        let spec = build_mlp_spec(&ra.config.arch);
        let a_end = &ra.final_checkpoint().params;
        let b_end = &rb.final_checkpoint().params;
        let epochs = checkpoint_epochs.clone().unwrap_or_else(|| vec![ra.final_checkpoint().epoch]);
        let mut table = Table::new(&["epoch", "pruning", "fraction", "split"], cols);
        for &t in &epochs {
            let a_t = &ra.at_epoch(t)?.params;
            let b_t = &rb.at_epoch(t)?.params;
            for (fi, &frac) in fractions.iter().enumerate() {
                for &pruning in &prunings {
                    let (mask_a, mask_b) = if frac == 0.0 {
                        (Mask::ones(a_t.arch()), Mask::ones(b_t.arch()))
                    } else {
                        match pruning {
                            Pruning::Magnitude => (
                                magnitude_prune(a_t, &Mask::ones(a_t.arch()), frac)?,
                                magnitude_prune(b_t, &Mask::ones(b_t.arch()), frac)?,
                            ),
                            Pruning::Random => {
                                let s = seed.wrapping_mul(1000).wrapping_add(10 * fi as u64);
                                (
                                    random_prune(&Mask::ones(a_t.arch()), frac, s)?,
                                    random_prune(&Mask::ones(b_t.arch()), frac, s + 1)?,
                                )
                            }
                        }
                    };
                    let pa = mask_a.apply(a_t)?;
                    let pb = mask_b.apply(b_t)?;
                    let p = match method {
                        MatchMethod::Weight => weight_match(&pa, &pb, &spec, &options, None, None)?,
                        MatchMethod::Activation => activation_match(&pa, &pb, &spec, eval.train())?,
                    }
                    .permutation;
                    let pruned = eval.barrier(&pa, &apply_permutation(&pb, &spec, &p)?)?;
                    let dense = eval.barrier(a_end, &apply_permutation(b_end, &spec, &p)?)?;
                    for ((split, v), (_, d)) in Eval::barrier_rows(&pruned).into_iter().zip(Eval::barrier_rows(&dense)) {
                        table.push(
                            vec![t.to_string(), pruning.name().into(), frac.to_string(), split],
                            seed,
                            vec![v[0], v[1], d[0], d[1]],
                        );
                    }
                }
            }
        }
        Ok(table)
    })?;

    let mut table = Table::new(&["epoch", "pruning", "fraction", "split"], cols);
    for t in tables {
        table.extend(t);
    }
    table.write(&ctx.out, "prune_align")?;
    let mut inputs: BTreeMap<String, String> = eval.input_hashes().into_iter().collect();
    inputs.extend(source.input_hashes()?);
    let prov = Provenance {
        command: "prune-align",
        resolved,
        train_config: source.train_config().cloned(),
        inputs,
    };
    ctx.out.write_json("summary.json", &prov.summary(json!({ "prune_align": table.to_json() })))
}
