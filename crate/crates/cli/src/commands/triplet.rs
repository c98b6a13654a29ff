//! `triplet`: direct versus indirect alignment through a third network,
//! swept over hidden widths.

use permalign_core::align::MatchMethod;
use permalign_core::connectivity::triplet_test;
use permalign_core::model::{build_mlp_spec, ArchitectureSpec};
use permalign_core::train::{train as train_run, TrainConfig};
use serde_json::json;

use crate::error::Result;
use crate::experiment::{read_match_options, replicate_config, seeds, EvalKeys, ROLE_A, ROLE_B, ROLE_C};
use crate::jobs::run_indexed;
use crate::manifest::Manifest;
use crate::output::{Provenance, Table};
use crate::Ctx;

const COLS: &[&str] = &[
    "direct_barrier_loss",
    "indirect_barrier_loss",
    "direct_barrier_error",
    "indirect_barrier_error",
    "fp_fraction",
];

/// Every hidden layer of `base` resized to `width`.
fn with_width(base: &TrainConfig, width: usize) -> Result<TrainConfig> {
    let a = &base.arch;
    let arch = ArchitectureSpec::new(a.input_dim, vec![width; a.hidden_dims.len()], a.output_dim, a.use_layer_norm)?;
    Ok(TrainConfig { arch, ..base.clone() })
}

pub fn triplet(m: &Manifest, ctx: &mut Ctx) -> Result<()> {
    let mut f = m.fields();
    let eval_keys = EvalKeys::read_single(&mut f);
    let base = f.train_config();
    let seeds = seeds(&mut f, "0,1,2");
    let widths: Vec<usize> = f.list("widths", "64,128,256,512");
    if widths.contains(&0) {
        f.error("`widths` must be positive");
    }
    let method: MatchMethod = f.get_with("method", MatchMethod::Weight, "weight");
    let options = read_match_options(&mut f);
    let resolved = f.finish()?;
    let base = base.expect("validated");
    let eval = eval_keys.load()?;
    let (_, test) = eval.primary();

    let n = widths.len() * seeds.len();
    let rows = run_indexed(n, ctx.jobs, |i| {
        let (width, seed) = (widths[i / seeds.len()], seeds[i % seeds.len()]);
        let cfg = with_width(&base, width)?;
        let mut nets = Vec::new();
        for role in [ROLE_A, ROLE_B, ROLE_C] {
            nets.push(train_run(&replicate_config(&cfg, seed, role), eval.train(), None)?.final_checkpoint().params.clone());
        }
        let spec = build_mlp_spec(&cfg.arch);
        let r = triplet_test(&nets[0], &nets[1], &nets[2], &spec, method, eval.train(), test, &options)?;
        Ok((
            width,
            seed,
            vec![
                r.direct_barrier,
                r.indirect_barrier,
                r.direct_barrier_error,
                r.indirect_barrier_error,
                r.fp_fraction,
            ],
        ))
    })?;

    let mut table = Table::new(&["width"], COLS);
    for (width, seed, vals) in rows {
        table.push(vec![width.to_string()], seed, vals);
    }
    table.write(&ctx.out, "triplet")?;
    let prov = Provenance {
        command: "triplet",
        resolved,
        train_config: Some(base),
        inputs: eval.input_hashes().into_iter().collect(),
    };
    ctx.out.write_json("summary.json", &prov.summary(json!({ "split": eval.primary().0.name(), "triplet": table.to_json() })))
}
