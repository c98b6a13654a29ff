//! `train`, `match` and `barrier`.

use std::collections::BTreeMap;

use permalign_core::align::MatchMethod;
use permalign_core::connectivity::evaluate;
use permalign_core::data::DataBundle;
use permalign_core::model::{apply_permutation, build_mlp_spec, Permutation};
use permalign_core::train::train as train_run;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::experiment::{align, load_checkpoint, read_match_options, replicate_config, save_run, seeds, EvalKeys, ROLE_A, ROLE_B, ROLE_C};
use crate::jobs::run_indexed;
use crate::manifest::Manifest;
use crate::output::{hash_dataset, hash_file, Provenance, Table};
use crate::Ctx;

fn parse_role(s: &str) -> Option<u64> {
    match s {
        "a" => Some(ROLE_A),
        "b" => Some(ROLE_B),
        "c" => Some(ROLE_C),
        _ => None,
    }
}

/// Trains one run per seed into `run-<seed>/`.
pub fn train(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let eval_keys = EvalKeys::read(&mut f, false);
    let base = f.train_config();
    let seeds = seeds(&mut f, "0");
    let role_name: String = f.get("role", "a".to_string());
    let role = parse_role(&role_name);
    if role.is_none() {
        f.error(format!("`role` must be a, b or c, got {role_name:?}"));
    }
    let resolved = f.finish()?;
    let (base, role) = (base.expect("validated"), role.expect("validated"));
    let eval = eval_keys.load()?;

    let runs = run_indexed(seeds.len(), ctx.jobs, |i| {
        let cfg = replicate_config(&base, seeds[i], role);
        let run = train_run(&cfg, eval.train(), None)?;
        let mut vals = Vec::new();
        for &split in &eval.splits {
            let e = evaluate(&run.final_checkpoint().params, eval.eval_set(split).expect("split loaded"))?;
            vals.push((split, e));
        }
        Ok((run, vals))
    })?;

    let mut table = Table::new(&["split"], &["loss", "error", "accuracy"]);
    for (seed, (run, vals)) in seeds.iter().zip(&runs) {
        save_run(&ctx.out, &format!("run-{seed}"), run)?;
        for (split, e) in vals {
            table.push(vec![split.name().into()], *seed, vec![e.mean_cross_entropy, e.error_rate, e.accuracy()]);
        }
    }
    table.write(&ctx.out, "final_eval")?;
    let prov = Provenance {
        command: "train",
        resolved,
        train_config: Some(base),
        inputs: eval.input_hashes().into_iter().collect(),
    };
    ctx.out.write_json("summary.json", &prov.summary(json!({ "final_eval": table.to_json() })))
}

/// Aligns checkpoint B to checkpoint A.
pub fn match_cmd(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let path_a = f.input_path("ckpt_a", true);
    let path_b = f.input_path("ckpt_b", true);
    let method: MatchMethod = f.get_with("method", MatchMethod::Weight, "weight");
    let options = read_match_options(&mut f);
    let uri: Option<String> = f.optional("data");
    if method == MatchMethod::Activation && uri.is_none() {
        f.error("activation matching needs `data`");
    }
    let resolved = f.finish()?;
    let (path_a, path_b) = (path_a.expect("validated"), path_b.expect("validated"));

    let a = load_checkpoint(&path_a)?;
    let b = load_checkpoint(&path_b)?;
    if a.params.arch() != b.params.arch() {
        return Err(CliError::invalid("checkpoints have different architectures"));
    }
    let spec = build_mlp_spec(a.params.arch());
    let mut inputs = BTreeMap::from([
        ("ckpt_a".to_string(), hash_file(&path_a)?),
        ("ckpt_b".to_string(), hash_file(&path_b)?),
    ]);
    let bundle = match &uri {
        Some(u) => {
            let b = DataBundle::load(u)?;
            inputs.insert(format!("data:{u}:train"), hash_dataset(&b.train));
            Some(b)
        }
        None => None,
    };
    let report = align(method, &a.params, &b.params, &spec, bundle.as_ref().map(|b| &b.train), &options)?;
    ctx.out.write("perm.txt", report.permutation.to_text(&spec)?)?;
    ctx.out.write_json("report.json", &serde_json::to_value(&report).expect("report serializes"))?;
    let aligned = apply_permutation(&b.params, &spec, &report.permutation)?;
    let prov = Provenance {
        command: "match",
        resolved,
        train_config: None,
        inputs,
    };
    let results = json!({
        "total_similarity": report.total_similarity,
        "sweeps": report.sweeps,
        "similarity_per_sweep": report.similarity_per_sweep,
        "is_identity": report.permutation.is_identity(),
        "l2_before": a.params.l2_distance(&b.params)?,
        "l2_after": a.params.l2_distance(&aligned)?,
    });
    ctx.out.write_json("summary.json", &prov.summary(results))
}

/// Barrier curve between A and B, optionally permuting B first.
pub fn barrier(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let path_a = f.input_path("ckpt_a", true);
    let path_b = f.input_path("ckpt_b", true);
    let perm_path = f.input_path("perm", false);
    let eval_keys = EvalKeys::read(&mut f, true);
    let resolved = f.finish()?;
    let (path_a, path_b) = (path_a.expect("validated"), path_b.expect("validated"));

    let a = load_checkpoint(&path_a)?;
    let b = load_checkpoint(&path_b)?;
    if a.params.arch() != b.params.arch() {
        return Err(CliError::invalid("checkpoints have different architectures"));
    }
    let mut inputs = BTreeMap::from([
        ("ckpt_a".to_string(), hash_file(&path_a)?),
        ("ckpt_b".to_string(), hash_file(&path_b)?),
    ]);
    let b_params = match &perm_path {
        Some(p) => {
            inputs.insert("perm".into(), hash_file(p)?);
            let spec = build_mlp_spec(b.params.arch());
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(format!("reading {}", p.display()), e))?;
            let perm = Permutation::from_text(&text, &spec)?;
            apply_permutation(&b.params, &spec, &perm)?
        }
        None => b.params.clone(),
    };
    let eval = eval_keys.load()?;
    inputs.extend(eval.input_hashes());
    let curve = eval.barrier(&a.params, &b_params)?;
    ctx.out.write("curve.csv", curve.to_csv())?;
    let s = curve.summary();
    let prov = Provenance {
        command: "barrier",
        resolved,
        train_config: None,
        inputs,
    };
    let results = json!({
        "barrier_loss_train": s.barrier_loss_train,
        "barrier_loss_test": s.barrier_loss_test,
        "barrier_error_train": s.barrier_error_train,
        "barrier_error_test": s.barrier_error_test,
        "n_alpha": s.n_alpha,
        "seeds": [a.init_seed, b.init_seed],
    });
    ctx.out.write_json("summary.json", &prov.summary(results))
}
