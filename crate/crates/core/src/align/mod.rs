//! Permutation search: weight matching by greedy coordinate ascent over
//! index groups, activation matching, partial layerwise composition and
//! fixed-point counts.

mod lsa;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{apply_permutation, permute_axis, NetworkParams, ParamId, Permutation, PermutationSpec};
use crate::sparsity::Mask;

pub use lsa::{solve_lsa, GramMatrix};

pub const DEFAULT_MAX_SWEEPS: usize = 100;

/// Examples per forward pass when accumulating activation statistics.
pub const ACTIVATION_BATCH: usize = 1024;

#[derive(Clone, Debug, Serialize)]
pub struct MatchReport {
    pub permutation: Permutation,
    /// Sum of `<A_p, P[B]_p>` over every matched parameter tensor `p`, each
    /// counted once (activation matching: sum of per-group objectives).
    pub total_similarity: f64,
    pub sweeps: usize,
    pub similarity_per_sweep: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub seed: u64,
    pub max_sweeps: usize,
    /// Include biases and norm affine parameters in the feature rows.
    pub include_bias_norm: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            include_bias_norm: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    Weight,
    Activation,
}

impl std::str::FromStr for MatchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(Self::Weight),
            "activation" => Ok(Self::Activation),
            _ => Err(Error::Config(format!("unknown match method {s:?}"))),
        }
    }
}

fn check_pair(a: &NetworkParams, b: &NetworkParams, spec: &PermutationSpec) -> Result<()> {
    if a.arch() != b.arch() {
        return Err(Error::ArchMismatch);
    }
    spec.check_params(a)
}

fn group_features(
    params: &NetworkParams,
    spec: &PermutationSpec,
    group: usize,
    mask: Option<&Mask>,
    include_bias_norm: bool,
) -> Result<Array2<f64>> {
    let g = spec
        .groups()
        .get(group)
        .ok_or_else(|| Error::InvalidArgument(format!("group {group} out of range")))?;
    let mut blocks = Vec::with_capacity(g.targets.len());
    for t in &g.targets {
        let is_weight = matches!(t.param, ParamId::Weight(_));
        if !is_weight && !include_bias_norm {
            continue;
        }
        let tensor = params
            .tensor(t.param)
            .ok_or_else(|| Error::SpecMismatch(format!("no parameter {}", t.param.name())))?;
        let mut owned = tensor.to_owned();
        if let (ParamId::Weight(l), Some(m)) = (t.param, mask) {
            let m = m.layer(l);
            owned.zip_mut_with(&m.into_dyn(), |w, &k| {
                if k == 0 {
                    *w = 0.0;
                }
            });
        }
        let mut moved = owned.view();
        moved.swap_axes(0, t.axis);
        let rows = moved.shape()[0];
        let flat = moved
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, moved.len() / rows.max(1)))
            .map_err(|e| Error::Format(e.to_string()))?;
        blocks.push(flat);
    }
    let views: Vec<ArrayView2<'_, f64>> = blocks.iter().map(|b| b.view()).collect();
    concatenate(Axis(1), &views).map_err(|e| Error::Format(e.to_string()))
}

/// The `d x q` feature matrix of one index group: every targeted parameter
/// axis moved to the front and flattened, concatenated along `q`. Masked
/// weights contribute zeros.
pub fn group_params(
    params: &NetworkParams,
    spec: &PermutationSpec,
    group: usize,
    mask: Option<&Mask>,
) -> Result<Array2<f64>> {
    if let Some(m) = mask {
        m.check_arch(params.arch())?;
    }
    group_features(params, spec, group, mask, true)
}

/// `rows_a · rows_bᵀ`.
pub fn gram(rows_a: ArrayView2<'_, f64>, rows_b: ArrayView2<'_, f64>) -> Result<GramMatrix> {
    if rows_a.dim() != rows_b.dim() {
        return Err(Error::shape(format!("{:?}", rows_a.dim()), format!("{:?}", rows_b.dim())));
    }
    GramMatrix::new(rows_a.dot(&rows_b.t()))
}

/// Inner product of all matched parameter tensors, each counted once.
fn similarity(a: &NetworkParams, b: &NetworkParams, include_bias_norm: bool) -> f64 {
    a.param_ids()
        .into_iter()
        .filter(|id| include_bias_norm || matches!(id, ParamId::Weight(_)))
        .map(|id| {
            let ta = a.tensor(id).expect("same arch");
            let tb = b.tensor(id).expect("same arch");
            ta.iter().zip(tb.iter()).map(|(x, y)| x * y).sum::<f64>()
        })
        .sum()
}

/// Greedy coordinate ascent over index groups: starting from the identity,
/// each sweep visits the groups in a seeded random order and replaces that
/// group's permutation by the exact assignment optimum given the current
/// state of every other group. Stops once a sweep fails to strictly raise
/// the total similarity, or after `max_sweeps`.
///
/// Masks are applied before matching, so pruned weights count as zeros.
/// The returned permutation `P` satisfies `apply_permutation(b, P) ≈ a`.
pub fn weight_match(
    a: &NetworkParams,
    b: &NetworkParams,
    spec: &PermutationSpec,
    options: &MatchOptions,
    mask_a: Option<&Mask>,
    mask_b: Option<&Mask>,
) -> Result<MatchReport> {
    check_pair(a, b, spec)?;
    if options.max_sweeps == 0 {
        return Err(Error::InvalidArgument("max_sweeps must be at least 1".into()));
    }
    let a = match mask_a {
        Some(m) => m.apply(a)?,
        None => a.clone(),
    };
    let b = match mask_b {
        Some(m) => m.apply(b)?,
        None => b.clone(),
    };
    let features_a = (0..spec.n_groups())
        .map(|g| group_features(&a, spec, g, None, options.include_bias_norm))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut perm = Permutation::identity(spec);
    let mut current = b.clone();
    let mut order: Vec<usize> = (0..spec.n_groups()).collect();
    let mut per_sweep: Vec<f64> = Vec::new();
    let mut accepted = (perm.clone(), current.clone());
    loop {
        order.shuffle(&mut rng);
        for &g in &order {
            let fb = group_features(&current, spec, g, None, options.include_bias_norm)?;
            let gm = gram(features_a[g].view(), fb.view())?;
            let (pi, objective) = solve_lsa(&gm);
            // Keep the current assignment unless the optimum strictly beats it.
            if objective <= gm.trace() {
                continue;
            }
            for t in &spec.groups()[g].targets {
                permute_axis(&mut current, t.param, t.axis, &pi);
            }
            let old = perm.group(g).to_vec();
            perm.set_group(g, pi.iter().map(|&r| old[r]).collect());
        }
        let sim = similarity(&a, &current, options.include_bias_norm);
        if let Some(&last) = per_sweep.last() {
            if sim < last {
                // Only reachable through rounding; keep the better state.
                (perm, current) = accepted;
                break;
            }
            per_sweep.push(sim);
            if sim == last {
                break;
            }
        } else {
            per_sweep.push(sim);
        }
        accepted = (perm.clone(), current.clone());
        if per_sweep.len() >= options.max_sweeps {
            break;
        }
    }
    debug_assert!(apply_permutation(&b, spec, &perm).map(|p| p == current).unwrap_or(false));
    Ok(MatchReport {
        total_similarity: *per_sweep.last().expect("at least one sweep"),
        sweeps: per_sweep.len(),
        similarity_per_sweep: per_sweep,
        permutation: perm,
    })
}

/// The hidden layer whose output axis a group permutes.
fn group_layer(spec: &PermutationSpec, group: usize) -> Result<usize> {
    spec.groups()[group]
        .targets
        .iter()
        .find_map(|t| match (t.param, t.axis) {
            (ParamId::Weight(l), 0) => Some(l),
            _ => None,
        })
        .ok_or_else(|| Error::SpecMismatch(format!("group {group} permutes no weight rows")))
}

/// Per-group Gram matrices `sum_x act_A(x) act_B(x)ᵀ` of post-activation
/// hidden outputs, accumulated over `data` in batches of `batch_size`.
pub fn activation_grams(
    a: &NetworkParams,
    b: &NetworkParams,
    spec: &PermutationSpec,
    data: &Dataset,
    batch_size: usize,
) -> Result<Vec<GramMatrix>> {
    check_pair(a, b, spec)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layers = (0..spec.n_groups()).map(|g| group_layer(spec, g)).collect::<Result<Vec<_>>>()?;
    let mut acc: Vec<Array2<f64>> = spec.sizes().iter().map(|&d| Array2::zeros((d, d))).collect();
    let x = data.features();
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size.max(1)).min(data.len());
        let batch = x.slice(ndarray::s![start..end, ..]);
        let acts_a = a.hidden_activations(batch)?;
        let acts_b = b.hidden_activations(batch)?;
        for (g, &l) in layers.iter().enumerate() {
            acc[g] += &acts_a[l].t().dot(&acts_b[l]);
        }
        start = end;
    }
    acc.into_iter().map(GramMatrix::new).collect()
}

/// One assignment per group on activation Gram matrices over the training
/// data. Groups are solved independently in depth order: permuting earlier
/// layers of `b` leaves the set of later-layer activations unchanged.
pub fn activation_match(
    a: &NetworkParams,
    b: &NetworkParams,
    spec: &PermutationSpec,
    data: &Dataset,
) -> Result<MatchReport> {
    let grams = activation_grams(a, b, spec, data, ACTIVATION_BATCH)?;
    let mut groups = Vec::with_capacity(grams.len());
    let mut total = 0.0;
    for g in &grams {
        let (pi, objective) = solve_lsa(g);
        if objective <= g.trace() {
            total += g.trace();
            groups.push((0..g.size()).collect());
        } else {
            total += objective;
            groups.push(pi);
        }
    }
    Ok(MatchReport {
        permutation: Permutation::new(groups)?,
        total_similarity: total,
        sweeps: 1,
        similarity_per_sweep: vec![total],
    })
}

/// Matches with the chosen method and default options.
pub fn match_networks(
    method: MatchMethod,
    a: &NetworkParams,
    b: &NetworkParams,
    spec: &PermutationSpec,
    data: &Dataset,
    options: &MatchOptions,
) -> Result<MatchReport> {
    match method {
        MatchMethod::Weight => weight_match(a, b, spec, options, None, None),
        MatchMethod::Activation => activation_match(a, b, spec, data),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialMode {
    /// Groups below `k` from `p_t`, the rest from `p_end`.
    BottomUp,
    /// Groups from `k` upward from `p_t`, the rest from `p_end`.
    TopDown,
    /// Only group `k` from `p_t`.
    PutIn,
    /// Every group from `p_t` except group `k`.
    LeaveOut,
}

impl PartialMode {
    pub const ALL: [PartialMode; 4] = [Self::BottomUp, Self::TopDown, Self::PutIn, Self::LeaveOut];

    pub fn name(self) -> &'static str {
        match self {
            Self::BottomUp => "bottom_up",
            Self::TopDown => "top_down",
            Self::PutIn => "put_in",
            Self::LeaveOut => "leave_out",
        }
    }
}

impl std::str::FromStr for PartialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown partial mode {s:?}")))
    }
}

/// Mixes two permutations group by group.
pub fn partial_perm(p_t: &Permutation, p_end: &Permutation, mode: PartialMode, k: usize) -> Result<Permutation> {
    if p_t.sizes() != p_end.sizes() {
        return Err(Error::SpecMismatch("permutations have different group sizes".into()));
    }
    let n = p_t.n_groups();
    let limit = match mode {
        PartialMode::BottomUp | PartialMode::TopDown => n,
        PartialMode::PutIn | PartialMode::LeaveOut => n.saturating_sub(1),
    };
    if k > limit || (n == 0 && matches!(mode, PartialMode::PutIn | PartialMode::LeaveOut)) {
        return Err(Error::InvalidArgument(format!("group index {k} out of range for {n} groups")));
    }
    let from_t = |g: usize| match mode {
        PartialMode::BottomUp => g < k,
        PartialMode::TopDown => g >= k,
        PartialMode::PutIn => g == k,
        PartialMode::LeaveOut => g != k,
    };
    let groups = (0..n)
        .map(|g| if from_t(g) { p_t.group(g) } else { p_end.group(g) }.to_vec())
        .collect();
    Permutation::new(groups)
}

/// Per-group counts of indices on which `p` and `q` agree, and the overall
/// fraction.
pub fn fixed_points(p: &Permutation, q: &Permutation) -> Result<(Vec<usize>, f64)> {
    if p.sizes() != q.sizes() {
        return Err(Error::SpecMismatch("permutations have different group sizes".into()));
    }
    let counts: Vec<usize> = p
        .groups()
        .iter()
        .zip(q.groups())
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x == y).count())
        .collect();
    let total: usize = p.sizes().iter().sum();
    let fraction = if total == 0 {
        1.0
    } else {
        counts.iter().sum::<usize>() as f64 / total as f64
    };
    Ok((counts, fraction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::{build_mlp_spec, ArchitectureSpec};
    use crate::sparsity::random_prune;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_params(arch: &ArchitectureSpec, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..arch.n_params()).map(|_| StandardNormal.sample(&mut rng)).collect();
        NetworkParams::from_flat(arch, &flat).unwrap()
    }

    #[test]
    fn feature_width_counts_every_target() {
        let arch = ArchitectureSpec::new(3, vec![2], 2, true).unwrap();
        let spec = build_mlp_spec(&arch);
        let p = gaussian_params(&arch, 1);
        let f = group_params(&p, &spec, 0, None).unwrap();
        assert_eq!(f.dim(), (2, 8));
        // Row 0 holds W1 row 0, then b1[0], g1[0], s1[0], then W2 column 0.
        let l = &p.layers();
        assert_eq!(f.row(0).to_vec()[..3], l[0].weight.row(0).to_vec()[..]);
        assert_eq!(f[[0, 3]], l[0].bias[0]);
        assert_eq!(f[[1, 6]], l[1].weight[[0, 1]]);
        assert_eq!(f[[1, 7]], l[1].weight[[1, 1]]);
    }

    #[test]
    fn masked_features() {
        let arch = ArchitectureSpec::new(3, vec![2], 2, true).unwrap();
        let spec = build_mlp_spec(&arch);
        let p = gaussian_params(&arch, 2);
        let ones = Mask::ones(&arch);
        assert_eq!(group_params(&p, &spec, 0, Some(&ones)).unwrap(), group_params(&p, &spec, 0, None).unwrap());
        let mut layers = ones.layers().to_vec();
        layers[0].fill(0);
        let zero_w1 = Mask::new(layers).unwrap();
        let f = group_params(&p, &spec, 0, Some(&zero_w1)).unwrap();
        assert!(f.columns().into_iter().take(3).all(|c| c.iter().all(|&v| v == 0.0)));
        assert!(f.column(3).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gram_against_loop_oracle() {
        let eye = Array2::<f64>::eye(3);
        assert_eq!(gram(eye.view(), eye.view()).unwrap().into_inner(), eye);
        let zero = Array2::<f64>::zeros((3, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        assert_eq!(gram(zero.view(), b.view()).unwrap().into_inner(), Array2::<f64>::zeros((3, 3)));
        let a = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let g = gram(a.view(), b.view()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[[i, k]] * b[[j, k]];
                }
                assert!((g.values()[[i, j]] - s).abs() <= 1e-9 * s.abs().max(1.0));
            }
        }
        assert!(gram(a.view(), Array2::zeros((3, 5)).view()).is_err());
    }

    #[test]
    fn self_match_is_identity() {
        let arch = ArchitectureSpec::new(5, vec![8, 9], 3, true).unwrap();
        let spec = build_mlp_spec(&arch);
        let a = gaussian_params(&arch, 4);
        let r = weight_match(&a, &a, &spec, &MatchOptions::default(), None, None).unwrap();
        assert!(r.permutation.is_identity());
        assert!(r.sweeps <= 2);
    }

    #[test]
    fn recovers_constructed_permutation() {
        let arch = ArchitectureSpec::new(6, vec![10, 12, 8], 4, true).unwrap();
        let spec = build_mlp_spec(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let a = gaussian_params(&arch, seed);
            let pi0 = Permutation::random(&spec, &mut rng);
            let b = apply_permutation(&a, &spec, &pi0).unwrap();
            let r = weight_match(&a, &b, &spec, &MatchOptions { seed, ..Default::default() }, None, None).unwrap();
            let back = apply_permutation(&b, &spec, &r.permutation).unwrap();
            assert!(back.max_abs_diff(&a).unwrap() < 1e-12);
            // b = pi0[a], so the aligning permutation is pi0's inverse.
            assert_eq!(fixed_points(&r.permutation, &pi0.invert()).unwrap().1, 1.0);
            assert!(r.similarity_per_sweep.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn sweeps_are_monotone_and_bounded() {
        let arch = ArchitectureSpec::new(4, vec![6, 6, 6, 6], 2, false).unwrap();
        let spec = build_mlp_spec(&arch);
        for seed in 0..20 {
            let a = gaussian_params(&arch, 100 + seed);
            let b = gaussian_params(&arch, 200 + seed);
            let r = weight_match(&a, &b, &spec, &MatchOptions { seed, ..Default::default() }, None, None).unwrap();
            assert!(r.similarity_per_sweep.windows(2).all(|w| w[0] <= w[1]));
            assert!(r.sweeps <= DEFAULT_MAX_SWEEPS);
            let aligned = apply_permutation(&b, &spec, &r.permutation).unwrap();
            assert!(aligned.l2_distance(&a).unwrap() <= b.l2_distance(&a).unwrap() + 1e-9);
            let capped = weight_match(&a, &b, &spec, &MatchOptions { seed, max_sweeps: 1, ..Default::default() }, None, None)
                .unwrap();
            assert_eq!(capped.sweeps, 1);
        }
        let a = gaussian_params(&arch, 1);
        assert!(weight_match(&a, &a, &spec, &MatchOptions { max_sweeps: 0, ..Default::default() }, None, None).is_err());
    }

    #[test]
    fn matching_is_deterministic_and_checks_arch() {
        let arch = ArchitectureSpec::mlp(4, &[7, 7], 2).unwrap();
        let spec = build_mlp_spec(&arch);
        let a = gaussian_params(&arch, 1);
        let b = gaussian_params(&arch, 2);
        let o = MatchOptions { seed: 9, ..Default::default() };
        let r1 = weight_match(&a, &b, &spec, &o, None, None).unwrap();
        let r2 = weight_match(&a, &b, &spec, &o, None, None).unwrap();
        assert_eq!(r1.permutation, r2.permutation);
        assert_eq!(r1.similarity_per_sweep, r2.similarity_per_sweep);
        let other = gaussian_params(&ArchitectureSpec::mlp(4, &[7, 8], 2).unwrap(), 3);
        assert!(matches!(weight_match(&a, &other, &spec, &o, None, None), Err(Error::ArchMismatch)));
    }

    #[test]
    fn masked_matching_uses_pruned_zeros() {
        let arch = ArchitectureSpec::mlp(5, &[8], 3).unwrap();
        let spec = build_mlp_spec(&arch);
        let a = gaussian_params(&arch, 1);
        let b = gaussian_params(&arch, 2);
        let m = random_prune(&Mask::ones(&arch), 0.5, 4).unwrap();
        let o = MatchOptions::default();
        let masked = weight_match(&a, &b, &spec, &o, Some(&m), Some(&m)).unwrap();
        let explicit = weight_match(&m.apply(&a).unwrap(), &m.apply(&b).unwrap(), &spec, &o, None, None).unwrap();
        assert_eq!(masked.permutation, explicit.permutation);
        let ones = Mask::ones(&arch);
        let dense = weight_match(&a, &b, &spec, &o, Some(&ones), Some(&ones)).unwrap();
        assert_eq!(dense.permutation, weight_match(&a, &b, &spec, &o, None, None).unwrap().permutation);
    }

    #[test]
    fn activation_matching_recovers_permutation() {
        let arch = ArchitectureSpec::mlp(6, &[10, 9], 3).unwrap();
        let spec = build_mlp_spec(&arch);
        let data = synth_blobs(300, 6, 3, 4.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Positive hidden biases keep every unit active on some inputs, so
        // no two units share an all-zero activation pattern.
        let mut a = gaussian_params(&arch, 7);
        for layer in &mut a.layers_mut()[..2] {
            layer.bias.fill(3.0);
        }
        let r = activation_match(&a, &a, &spec, &data).unwrap();
        assert!(r.permutation.is_identity());
        for _ in 0..5 {
            let pi0 = Permutation::random(&spec, &mut rng);
            let b = apply_permutation(&a, &spec, &pi0).unwrap();
            let r = activation_match(&a, &b, &spec, &data).unwrap();
            assert_eq!(r.permutation, pi0.invert());
        }
    }

    #[test]
    fn activation_gram_batching_is_stable() {
        let arch = ArchitectureSpec::mlp(6, &[10, 9], 3).unwrap();
        let spec = build_mlp_spec(&arch);
        let data = synth_blobs(500, 6, 3, 4.0, 2).unwrap();
        let a = gaussian_params(&arch, 1);
        let b = gaussian_params(&arch, 2);
        let full = activation_grams(&a, &b, &spec, &data, data.len()).unwrap();
        let reversed: Vec<usize> = (0..data.len()).rev().collect();
        let shuffled = data.subset(&reversed).unwrap();
        for (bs, d) in [(1, &data), (7, &data), (64, &shuffled)] {
            let batched = activation_grams(&a, &b, &spec, d, bs).unwrap();
            for (x, y) in full.iter().zip(&batched) {
                let diff = (&x.values() - &y.values()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
                assert!(diff <= 1e-6 * x.values().mapv(f64::abs).sum().max(1.0));
            }
        }
    }

    #[test]
    fn partial_permutations() {
        let sizes = [3, 4, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let random = |rng: &mut ChaCha8Rng| {
            Permutation::new(
                sizes
                    .iter()
                    .map(|&d| {
                        let mut v: Vec<usize> = (0..d).collect();
                        v.shuffle(rng);
                        v
                    })
                    .collect(),
            )
            .unwrap()
        };
        let pt = random(&mut rng);
        let pe = random(&mut rng);
        assert_eq!(partial_perm(&pt, &pe, PartialMode::BottomUp, 0).unwrap(), pe);
        assert_eq!(partial_perm(&pt, &pe, PartialMode::BottomUp, 3).unwrap(), pt);
        assert_eq!(partial_perm(&pt, &pe, PartialMode::TopDown, 0).unwrap(), pt);
        assert_eq!(partial_perm(&pt, &pe, PartialMode::TopDown, 3).unwrap(), pe);
        for k in 0..3 {
            let put = partial_perm(&pt, &pe, PartialMode::PutIn, k).unwrap();
            let leave = partial_perm(&pt, &pe, PartialMode::LeaveOut, k).unwrap();
            for g in 0..3 {
                let (from_put, from_leave) = (put.group(g), leave.group(g));
                if g == k {
                    assert_eq!((from_put, from_leave), (pt.group(g), pe.group(g)));
                } else {
                    assert_eq!((from_put, from_leave), (pe.group(g), pt.group(g)));
                }
            }
            // Swapping the roles of the inputs swaps the two modes.
            assert_eq!(partial_perm(&pe, &pt, PartialMode::LeaveOut, k).unwrap(), put);
        }
        assert!(partial_perm(&pt, &pe, PartialMode::BottomUp, 4).is_err());
        assert!(partial_perm(&pt, &pe, PartialMode::PutIn, 3).is_err());
        assert!(partial_perm(&pt, &Permutation::identity_for_sizes(&[3, 4]), PartialMode::PutIn, 0).is_err());
    }

    #[test]
    fn fixed_point_counts() {
        let p = Permutation::new(vec![vec![0, 1, 2]]).unwrap();
        let q = Permutation::new(vec![vec![1, 0, 2]]).unwrap();
        assert_eq!(fixed_points(&p, &p).unwrap(), (vec![3], 1.0));
        assert_eq!(fixed_points(&p, &q).unwrap(), (vec![1], 1.0 / 3.0));
        assert!(fixed_points(&p, &Permutation::new(vec![vec![0, 1]]).unwrap()).is_err());
    }

    #[test]
    fn random_fixed_point_rate() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 1000;
        let mut total = 0.0;
        for _ in 0..trials {
            let mut a: Vec<usize> = (0..n).collect();
            let mut b = a.clone();
            a.shuffle(&mut rng);
            b.shuffle(&mut rng);
            let (_, f) = fixed_points(&Permutation::new(vec![a]).unwrap(), &Permutation::new(vec![b]).unwrap()).unwrap();
            total += f;
        }
        let mean = total / trials as f64;
        // Mean fixed-point count of a random permutation is 1 with variance 1.
        assert!((mean - 1.0 / n as f64).abs() < 4.0 / (n as f64 * (trials as f64).sqrt()));
    }
}
