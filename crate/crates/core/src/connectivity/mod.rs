//! Loss and error along linear paths between networks: evaluation, barrier
//! curves, connectivity tests, indirect (triplet) alignment, instability of
//! spawned children, and loss-landscape planes.

mod landscape;

use std::fmt::Write as _;

use ndarray::{s, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{fixed_points, match_networks, MatchMethod, MatchOptions};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{apply_permutation, interpolate, NetworkParams, Permutation, PermutationSpec};
use crate::sparsity::Mask;
use crate::train::{spawn_children, Checkpoint, TrainConfig};

pub use landscape::{landscape_projection, Landscape, LandscapeOptions};

pub const DEFAULT_N_ALPHA: usize = 25;

/// Per-split cap on evaluation examples.
pub const MAX_EVAL_EXAMPLES: usize = 10_000;

const EVAL_BATCH: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_cross_entropy: f64,
    pub error_rate: f64,
    pub n_examples: usize,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.error_rate
    }
}

/// Per-example cross-entropy and 0-1 error, row by row.
fn per_example(logits: ArrayView2<'_, f64>, labels: &[usize], mut sink: impl FnMut(f64, bool)) {
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let mut best = 0;
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                best = j;
            }
        }
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        sink(lse - row[y], best != y);
    }
}

/// Mean softmax cross-entropy and 0-1 error over the whole split. Batches
/// are visited in index order and summed in 64-bit, so the result does not
/// depend on how the work is scheduled.
pub fn evaluate(params: &NetworkParams, data: &Dataset) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut wrong = 0usize;
    let x = data.features();
    let labels = data.labels();
    let mut start = 0;
    while start < data.len() {
        let end = (start + EVAL_BATCH).min(data.len());
        let logits = params.forward(x.slice(s![start..end, ..]))?;
        per_example(logits.view(), &labels[start..end], |l, e| {
            loss += l;
            wrong += e as usize;
        });
        start = end;
    }
    let n = data.len();
    Ok(EvalResult {
        mean_cross_entropy: loss / n as f64,
        error_rate: wrong as f64 / n as f64,
        n_examples: n,
    })
}

/// The first [`MAX_EVAL_EXAMPLES`] examples of a split.
pub fn eval_subset(data: &Dataset) -> Dataset {
    if data.len() > MAX_EVAL_EXAMPLES {
        data.head(MAX_EVAL_EXAMPLES)
    } else {
        data.clone()
    }
}

/// `n` equally spaced values from 0 to 1 inclusive.
pub fn alpha_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// `max_i values[i] - (alpha_i * values[last] + (1 - alpha_i) * values[0])`,
/// where the last grid point is `alpha = 1` (network A).
pub fn barrier_of(alphas: &[f64], values: &[f64]) -> f64 {
    let (first, last) = (values[0], values[values.len() - 1]);
    alphas
        .iter()
        .zip(values)
        .map(|(&a, &v)| {
            // Chord written so that equal endpoints give an exactly flat line.
            let chord = if a == 1.0 { last } else { first + a * (last - first) };
            v - chord
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCurve {
    pub split: Split,
    pub loss: Vec<f64>,
    pub error: Vec<f64>,
    pub barrier_loss: f64,
    pub barrier_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierCurve {
    pub alphas: Vec<f64>,
    pub splits: Vec<SplitCurve>,
}

impl BarrierCurve {
    pub fn split(&self, split: Split) -> Option<&SplitCurve> {
        self.splits.iter().find(|c| c.split == split)
    }

    /// `ℓ(A)`, the value at `alpha = 1`.
    pub fn endpoint_a(&self, split: Split) -> Option<EvalPoint> {
        self.split(split).map(|c| EvalPoint {
            loss: *c.loss.last().expect("non-empty"),
            error: *c.error.last().expect("non-empty"),
        })
    }

    /// `ℓ(B)`, the value at `alpha = 0`.
    pub fn endpoint_b(&self, split: Split) -> Option<EvalPoint> {
        self.split(split).map(|c| EvalPoint {
            loss: c.loss[0],
            error: c.error[0],
        })
    }

    /// Header `alpha,split,loss,error`, one row per (alpha, split).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,split,loss,error\n");
        for (i, a) in self.alphas.iter().enumerate() {
            for c in &self.splits {
                writeln!(out, "{a},{},{},{}", c.split.name(), c.loss[i], c.error[i]).expect("string write");
            }
        }
        out
    }

    pub fn summary(&self) -> BarrierSummary {
        let pick = |split, f: fn(&SplitCurve) -> f64| self.split(split).map(f);
        BarrierSummary {
            barrier_loss_train: pick(Split::Train, |c| c.barrier_loss),
            barrier_loss_test: pick(Split::Test, |c| c.barrier_loss),
            barrier_error_train: pick(Split::Train, |c| c.barrier_error),
            barrier_error_test: pick(Split::Test, |c| c.barrier_error),
            n_alpha: self.alphas.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub loss: f64,
    pub error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSummary {
    pub barrier_loss_train: Option<f64>,
    pub barrier_loss_test: Option<f64>,
    pub barrier_error_train: Option<f64>,
    pub barrier_error_test: Option<f64>,
    pub n_alpha: usize,
}

/// Loss and error of `interpolate(a, b, alpha)` on each split for
/// `n_alpha` equally spaced alphas, with the barrier of each curve.
pub fn barrier_curve(a: &NetworkParams, b: &NetworkParams, splits: &[&Dataset], n_alpha: usize) -> Result<BarrierCurve> {
    barrier_curve_on(a, b, splits, &alpha_grid(n_alpha.max(2)), n_alpha)
}

/// [`barrier_curve`] on an explicit grid, which must start at 0, end at 1
/// and increase strictly.
pub fn barrier_curve_on_grid(a: &NetworkParams, b: &NetworkParams, splits: &[&Dataset], alphas: &[f64]) -> Result<BarrierCurve> {
    barrier_curve_on(a, b, splits, alphas, alphas.len())
}

fn barrier_curve_on(
    a: &NetworkParams,
    b: &NetworkParams,
    splits: &[&Dataset],
    alphas: &[f64],
    n_alpha: usize,
) -> Result<BarrierCurve> {
    if n_alpha < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 alphas, got {n_alpha}")));
    }
    if alphas[0] != 0.0 || alphas[alphas.len() - 1] != 1.0 || alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("alpha grid must increase strictly from 0 to 1".into()));
    }
    if a.arch() != b.arch() {
        return Err(Error::ArchMismatch);
    }
    let mut curves: Vec<SplitCurve> = splits
        .iter()
        .map(|d| SplitCurve {
            split: d.split(),
            loss: Vec::with_capacity(alphas.len()),
            error: Vec::with_capacity(alphas.len()),
            barrier_loss: 0.0,
            barrier_error: 0.0,
        })
        .collect();
    for &alpha in alphas {
        let p = interpolate(a, b, alpha)?;
        for (c, d) in curves.iter_mut().zip(splits) {
            let e = evaluate(&p, d)?;
            c.loss.push(e.mean_cross_entropy);
            c.error.push(e.error_rate);
        }
    }
    for c in &mut curves {
        c.barrier_loss = barrier_of(alphas, &c.loss);
        c.barrier_error = barrier_of(alphas, &c.error);
    }
    Ok(BarrierCurve {
        alphas: alphas.to_vec(),
        splits: curves,
    })
}

/// True iff the test-split error barrier is at most `threshold`.
pub fn is_linearly_connected(a: &NetworkParams, b: &NetworkParams, test: &Dataset, threshold: f64) -> Result<bool> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be non-negative")));
    }
    let curve = barrier_curve(a, b, &[test], DEFAULT_N_ALPHA)?;
    Ok(curve.splits[0].barrier_error <= threshold)
}

/// Twice the standard deviation of the error-rate estimator over bootstrap
/// resamples of `data`.
pub fn bootstrap_threshold(params: &NetworkParams, data: &Dataset, resamples: usize, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if resamples < 2 {
        return Err(Error::InvalidArgument("need at least 2 bootstrap resamples".into()));
    }
    let logits = params.forward(data.features())?;
    let mut wrong = Vec::with_capacity(data.len());
    per_example(logits.view(), data.labels(), |_, e| wrong.push(e));
    let n = wrong.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let estimates: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| wrong[rng.random_range(0..n)]).count() as f64 / n as f64)
        .collect();
    let mean = estimates.iter().sum::<f64>() / resamples as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    Ok(2.0 * var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    /// Barrier between `A` and `B` aligned directly to `A`.
    pub direct_barrier: f64,
    /// Barrier between `A` and `B` after each is aligned to `C`.
    pub indirect_barrier: f64,
    pub direct_barrier_error: f64,
    pub indirect_barrier_error: f64,
    /// Agreement between `P_{A→C}⁻¹ ∘ P_{B→C}` and `P_{B→A}`.
    pub fp_fraction: f64,
}

/// Indirect alignment through a third network. Barriers are measured on
/// `eval`; `match_data` feeds activation matching.
pub fn triplet_test(
    a: &NetworkParams,
    b: &NetworkParams,
    c: &NetworkParams,
    spec: &PermutationSpec,
    method: MatchMethod,
    match_data: &Dataset,
    eval: &Dataset,
    options: &MatchOptions,
) -> Result<TripletRecord> {
    if a.arch() != b.arch() || a.arch() != c.arch() {
        return Err(Error::ArchMismatch);
    }
    let p_ac = match_networks(method, c, a, spec, match_data, options)?.permutation;
    let p_bc = match_networks(method, c, b, spec, match_data, options)?.permutation;
    let p_ba = match_networks(method, a, b, spec, match_data, options)?.permutation;

    let a_c = apply_permutation(a, spec, &p_ac)?;
    let b_c = apply_permutation(b, spec, &p_bc)?;
    let b_a = apply_permutation(b, spec, &p_ba)?;
    let indirect = barrier_curve(&a_c, &b_c, &[eval], DEFAULT_N_ALPHA)?;
    let direct = barrier_curve(a, &b_a, &[eval], DEFAULT_N_ALPHA)?;
    let through_c = p_ac.invert().compose(&p_bc)?;
    let (_, fp_fraction) = fixed_points(&through_c, &p_ba)?;
    Ok(TripletRecord {
        direct_barrier: direct.splits[0].barrier_loss,
        indirect_barrier: indirect.splits[0].barrier_loss,
        direct_barrier_error: direct.splits[0].barrier_error,
        indirect_barrier_error: indirect.splits[0].barrier_error,
        fp_fraction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstabilityRecord {
    pub spawn_epoch: usize,
    /// Test error barrier between the two trained children.
    pub child_barrier: f64,
    pub child_barrier_loss: f64,
    /// Test error barrier between the first child of `A` and the first child
    /// of `B` permuted by the parents' `P_end`.
    pub cross_barrier_under_p: Option<f64>,
}

/// A second parent whose child is compared with `A`'s child after applying
/// `p_end`.
pub struct CrossParent<'a> {
    pub checkpoint: &'a Checkpoint,
    pub config: &'a TrainConfig,
    pub p_end: &'a Permutation,
    pub spec: &'a PermutationSpec,
}

/// Trains two children of `parent` with different minibatch orders and
/// measures the error barrier between them.
pub fn instability(
    parent: &Checkpoint,
    config: &TrainConfig,
    child_seeds: (u64, u64),
    train_data: &Dataset,
    test: &Dataset,
    mask: Option<&Mask>,
    cross: Option<CrossParent<'_>>,
) -> Result<InstabilityRecord> {
    let children = spawn_children(config, train_data, parent, &[child_seeds.0, child_seeds.1], mask)?;
    let curve = barrier_curve(&children[0].params, &children[1].params, &[test], DEFAULT_N_ALPHA)?;
    let cross_barrier_under_p = match cross {
        Some(other) => {
            if other.checkpoint.epoch != parent.epoch {
                return Err(Error::MissingCheckpoint(parent.epoch));
            }
            let child_b = spawn_children(other.config, train_data, other.checkpoint, &[child_seeds.0], mask)?;
            let aligned = apply_permutation(&child_b[0].params, other.spec, other.p_end)?;
            let c = barrier_curve(&children[0].params, &aligned, &[test], DEFAULT_N_ALPHA)?;
            Some(c.splits[0].barrier_error)
        }
        None => None,
    };
    Ok(InstabilityRecord {
        spawn_epoch: parent.epoch,
        child_barrier: curve.splits[0].barrier_error,
        child_barrier_loss: curve.splits[0].barrier_loss,
        cross_barrier_under_p,
    })
}
