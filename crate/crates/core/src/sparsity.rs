//! Binary weight masks, global magnitude pruning, iterative magnitude
//! pruning with rewinding, and mask transport across aligned networks.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connectivity::{evaluate, EvalResult};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    apply_permutation, ArchitectureSpec, Container, NetworkParams, ParamId, Permutation, PermutationSpec, Tensor,
    TensorData, MASK_MAGIC,
};
use crate::train::{train_from, Checkpoint, StartState, TrainConfig, TrainRun};

/// Fraction of surviving weights removed per IMP level.
pub const IMP_RATE: f64 = 0.2;

/// One `{0,1}` tensor per weight matrix. Biases and norm parameters are
/// never pruned.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    layers: Vec<Array2<u8>>,
}

impl Mask {
    pub fn new(layers: Vec<Array2<u8>>) -> Result<Self> {
        if layers.iter().flatten().any(|&v| v > 1) {
            return Err(Error::InvalidMask("entries must be 0 or 1".into()));
        }
        Ok(Self { layers })
    }

    pub fn ones(arch: &ArchitectureSpec) -> Self {
        let layers = (0..arch.n_layers()).map(|i| Array2::ones(arch.layer_shape(i))).collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Array2<u8>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> ArrayView2<'_, u8> {
        self.layers[l].view()
    }

    pub fn check_arch(&self, arch: &ArchitectureSpec) -> Result<()> {
        if self.layers.len() != arch.n_layers() {
            return Err(Error::InvalidMask(format!(
                "{} mask layers for a {}-layer network",
                self.layers.len(),
                arch.n_layers()
            )));
        }
        for (i, m) in self.layers.iter().enumerate() {
            if m.dim() != arch.layer_shape(i) {
                return Err(Error::InvalidMask(format!(
                    "mask layer {} has shape {:?}, expected {:?}",
                    i + 1,
                    m.dim(),
                    arch.layer_shape(i)
                )));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Array2::len).sum()
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().flatten().filter(|&&v| v == 1).count()
    }

    pub fn density(&self) -> f64 {
        self.kept() as f64 / self.total() as f64
    }

    /// True when every weight pruned in `earlier` is also pruned here.
    pub fn is_nested_in(&self, earlier: &Mask) -> bool {
        self.layers.len() == earlier.layers.len()
            && self.layers.iter().zip(&earlier.layers).all(|(a, b)| {
                a.dim() == b.dim() && a.iter().zip(b).all(|(&now, &before)| before == 1 || now == 0)
            })
    }

    /// Elementwise product with the weights.
    pub fn apply(&self, params: &NetworkParams) -> Result<NetworkParams> {
        self.check_arch(params.arch())?;
        let mut out = params.clone();
        for (layer, m) in out.layers_mut().iter_mut().zip(&self.layers) {
            Zip::from(&mut layer.weight).and(m).for_each(|w, &k| {
                if k == 0 {
                    *w = 0.0;
                }
            });
        }
        Ok(out)
    }

    /// True when every pruned coordinate of `params` is exactly zero.
    pub fn is_satisfied_by(&self, params: &NetworkParams) -> bool {
        self.check_arch(params.arch()).is_ok()
            && params
                .layers()
                .iter()
                .zip(&self.layers)
                .all(|(l, m)| l.weight.iter().zip(m).all(|(&w, &k)| k == 1 || w == 0.0))
    }

    pub fn to_container(&self, level: usize, parent_run_id: &str) -> Container {
        let tensors = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, m)| Tensor {
                name: format!("m_W{}", i + 1),
                dims: m.shape().to_vec(),
                data: TensorData::U8(m.iter().copied().collect()),
            })
            .collect();
        Container {
            magic: MASK_MAGIC,
            metadata: serde_json::json!({
                "level": level,
                "density": self.density(),
                "parent_run_id": parent_run_id,
            }),
            tensors,
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 1.. {
            let Some(t) = c.tensor(&format!("m_W{i}")) else { break };
            let TensorData::U8(v) = &t.data else {
                return Err(Error::Format(format!("mask tensor m_W{i} is not uint8")));
            };
            let [r, cols] = t.dims[..] else {
                return Err(Error::Format(format!("mask tensor m_W{i} is not 2-D")));
            };
            layers.push(Array2::from_shape_vec((r, cols), v.clone()).map_err(|e| Error::Format(e.to_string()))?);
        }
        if layers.is_empty() {
            return Err(Error::Format("mask file has no m_W1".into()));
        }
        Mask::new(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>, level: usize, parent_run_id: &str) -> Result<()> {
        std::fs::write(path, self.to_container(level, parent_run_id).to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_container(&Container::from_bytes(&bytes, MASK_MAGIC)?)
    }
}

/// Number of surviving weights after `level` rounds of removing
/// `floor(IMP_RATE * survivors)`.
pub fn imp_keep_count(total: usize, level: usize) -> usize {
    (0..level).fold(total, |n, _| n - (IMP_RATE * n as f64).floor() as usize)
}

/// Unpruned weight coordinates `(layer, flat index)` in canonical order.
fn unpruned(mask: &Mask) -> Vec<(usize, usize)> {
    mask.layers
        .iter()
        .enumerate()
        .flat_map(|(l, m)| m.iter().enumerate().filter(|(_, &k)| k == 1).map(move |(i, _)| (l, i)))
        .collect()
}

fn prune_coords(current: &Mask, coords: impl IntoIterator<Item = (usize, usize)>) -> Mask {
    let mut out = current.clone();
    for (l, i) in coords {
        let cols = out.layers[l].ncols();
        out.layers[l][[i / cols, i % cols]] = 0;
    }
    out
}

/// Prunes surviving weights, smallest magnitude first across all layers,
/// until `keep` remain. Equal magnitudes are ordered by (layer, flat index).
pub fn prune_to_count(params: &NetworkParams, current: &Mask, keep: usize) -> Result<Mask> {
    current.check_arch(params.arch())?;
    let mut coords = unpruned(current);
    let n_remove = coords.len().saturating_sub(keep);
    let weights: Vec<&Array2<f64>> = params.layers().iter().map(|l| &l.weight).collect();
    let magnitude = |&(l, i): &(usize, usize)| {
        let w = weights[l];
        w[[i / w.ncols(), i % w.ncols()]].abs()
    };
    // Stable sort keeps the canonical (layer, index) order among ties.
    coords.sort_by(|a, b| magnitude(a).total_cmp(&magnitude(b)));
    Ok(prune_coords(current, coords.into_iter().take(n_remove)))
}

/// Removes the `floor(fraction * unpruned)` smallest-magnitude surviving
/// weights, ranked globally. Pruned weights are never revived.
pub fn magnitude_prune(params: &NetworkParams, current: &Mask, fraction: f64) -> Result<Mask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("prune fraction {fraction} outside (0, 1)")));
    }
    let n = current.kept();
    let remove = (fraction * n as f64).floor() as usize;
    prune_to_count(params, current, n - remove)
}

/// Removes `floor(fraction * unpruned)` surviving weights chosen uniformly at
/// random.
pub fn random_prune(current: &Mask, fraction: f64, seed: u64) -> Result<Mask> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("prune fraction {fraction} outside (0, 1)")));
    }
    let coords = unpruned(current);
    let remove = (fraction * coords.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, coords.len(), remove).into_vec();
    picked.sort_unstable();
    Ok(prune_coords(current, picked.into_iter().map(|i| coords[i])))
}

/// Single global magnitude pruning to the density IMP reaches at `level`.
pub fn one_shot_prune(params: &NetworkParams, level: usize) -> Result<Mask> {
    if level == 0 {
        return Err(Error::InvalidArgument("one-shot level must be at least 1".into()));
    }
    let ones = Mask::ones(params.arch());
    prune_to_count(params, &ones, imp_keep_count(ones.total(), level))
}

/// `params ⊙ mask` over the weights.
pub fn apply_mask(params: &NetworkParams, mask: &Mask) -> Result<NetworkParams> {
    mask.apply(params)
}

/// Relabels mask entries exactly as [`apply_permutation`] relabels weights.
pub fn permute_mask(mask: &Mask, spec: &PermutationSpec, perm: &Permutation) -> Result<Mask> {
    perm.conforms_to(spec)?;
    Permutation::new(perm.groups().to_vec())?;
    let mut out = mask.clone();
    for (group, p) in spec.groups().iter().zip(perm.groups()) {
        for t in &group.targets {
            if let ParamId::Weight(l) = t.param {
                let m = out
                    .layers
                    .get_mut(l)
                    .ok_or_else(|| Error::SpecMismatch(format!("mask has no layer {}", l + 1)))?;
                if m.shape()[t.axis] != p.len() {
                    return Err(Error::SpecMismatch(format!("mask layer {} axis {} length", l + 1, t.axis)));
                }
                *m = m.select(Axis(t.axis), p);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ImpOptions {
    pub levels: usize,
    pub rewind_epoch: usize,
    /// Retrain from the trained weights instead of rewinding them; the
    /// learning-rate schedule is replayed from the rewind epoch either way.
    pub lr_rewind: bool,
}

#[derive(Clone, Debug)]
pub struct ImpLevel {
    pub level: usize,
    pub mask: Mask,
    pub params: NetworkParams,
    pub eval: EvalResult,
}

#[derive(Clone, Debug)]
pub struct ImpRun {
    /// Level 0 is the dense network.
    pub levels: Vec<ImpLevel>,
    pub rewind: Checkpoint,
    pub dense: TrainRun,
    pub options: ImpOptions,
}

/// Iterative magnitude pruning: train dense, then per level prune 20% of the
/// survivors globally, rewind the survivors, and retrain with the mask
/// enforced after every step.
pub fn imp(config: &TrainConfig, train_data: &Dataset, eval_data: &Dataset, options: &ImpOptions) -> Result<ImpRun> {
    if options.rewind_epoch >= config.epochs.max(1) && options.levels > 0 {
        return Err(Error::InvalidArgument(format!(
            "rewind epoch {} must precede the final epoch {}",
            options.rewind_epoch, config.epochs
        )));
    }
    let mut dense_cfg = config.clone();
    dense_cfg.checkpoint_epochs.insert(options.rewind_epoch.min(config.epochs));
    let dense = crate::train::train(&dense_cfg, train_data, None)?;
    imp_from_dense(config, train_data, eval_data, options, dense)
}

/// IMP levels on top of an already-trained dense run, which must contain
/// the rewind checkpoint.
pub fn imp_from_dense(
    config: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    options: &ImpOptions,
    dense: TrainRun,
) -> Result<ImpRun> {
    let rewind = dense.at_epoch(options.rewind_epoch)?.clone();
    let dense_params = dense.final_checkpoint().params.clone();
    let mut levels = vec![ImpLevel {
        level: 0,
        mask: Mask::ones(&config.arch),
        eval: evaluate(&dense_params, eval_data)?,
        params: dense_params,
    }];
    let retrain_cfg = TrainConfig {
        checkpoint_epochs: Default::default(),
        ..config.clone()
    };
    for level in 1..=options.levels {
        let prev = levels.last().expect("level 0 present");
        let mask = magnitude_prune(&prev.params, &prev.mask, IMP_RATE)?;
        let start_params = if options.lr_rewind { &prev.params } else { &rewind.params };
        let start = StartState {
            params: mask.apply(start_params)?,
            momentum: None,
            epoch: options.rewind_epoch,
        };
        let run = train_from(&retrain_cfg, train_data, start, Some(&mask))?;
        let params = run.final_checkpoint().params.clone();
        levels.push(ImpLevel {
            level,
            eval: evaluate(&params, eval_data)?,
            mask,
            params,
        });
    }
    Ok(ImpRun {
        levels,
        rewind,
        dense,
        options: options.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransportRecord {
    pub level: usize,
    pub density: f64,
    /// Mask applied to the permuted, rewound B.
    pub permuted: EvalResult,
    /// Mask applied to the unpermuted, rewound B.
    pub naive: EvalResult,
    /// B pruned one-shot to the same density, rewound.
    pub one_shot: EvalResult,
}

/// Inputs shared by every level of a mask-transport comparison.
pub struct TransportSetup<'a> {
    pub spec: &'a PermutationSpec,
    /// Aligns dense B to dense A.
    pub p_dense: &'a Permutation,
    /// B's rewind checkpoint.
    pub b_rewind: &'a Checkpoint,
    /// B's trained dense weights, used for the one-shot baseline.
    pub b_final: &'a NetworkParams,
    pub config_b: &'a TrainConfig,
    pub train_data: &'a Dataset,
    pub eval_data: &'a Dataset,
}

/// Transports A's level-`level` IMP mask to B modulo permutation and
/// compares it with naive transport and one-shot pruning of B.
pub fn transport_mask(mask_a: &Mask, level: usize, setup: &TransportSetup<'_>) -> Result<TransportRecord> {
    let arch = setup.b_final.arch();
    mask_a.check_arch(arch)?;
    let expected = imp_keep_count(mask_a.total(), level);
    if mask_a.kept() != expected {
        return Err(Error::InvalidMask(format!(
            "mask keeps {} weights but level {level} keeps {expected}",
            mask_a.kept()
        )));
    }
    let cfg = TrainConfig {
        checkpoint_epochs: Default::default(),
        ..setup.config_b.clone()
    };
    let retrain = |start: &NetworkParams, mask: &Mask| -> Result<EvalResult> {
        let start = StartState {
            params: mask.apply(start)?,
            momentum: None,
            epoch: setup.b_rewind.epoch,
        };
        let run = train_from(&cfg, setup.train_data, start, Some(mask))?;
        evaluate(&run.final_checkpoint().params, setup.eval_data)
    };
    let b_permuted = apply_permutation(&setup.b_rewind.params, setup.spec, setup.p_dense)?;
    let permuted = retrain(&b_permuted, mask_a)?;
    let naive = retrain(&setup.b_rewind.params, mask_a)?;
    let os_mask = if level == 0 {
        Mask::ones(arch)
    } else {
        one_shot_prune(setup.b_final, level)?
    };
    let one_shot = retrain(&setup.b_rewind.params, &os_mask)?;
    Ok(TransportRecord {
        level,
        density: mask_a.density(),
        permuted,
        naive,
        one_shot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mlp_spec, Layer};
    use ndarray::array;
    use rand::Rng;

    fn params_from_weights(w1: Array2<f64>, w2: Array2<f64>) -> NetworkParams {
        let arch = ArchitectureSpec::mlp(w1.ncols(), &[w1.nrows()], w2.nrows()).unwrap();
        let b1 = ndarray::Array1::zeros(w1.nrows());
        let b2 = ndarray::Array1::zeros(w2.nrows());
        NetworkParams::new(
            arch,
            vec![
                Layer {
                    weight: w1,
                    bias: b1,
                    norm: None,
                },
                Layer {
                    weight: w2,
                    bias: b2,
                    norm: None,
                },
            ],
        )
        .unwrap()
    }

    fn random_params(arch: &ArchitectureSpec, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat: Vec<f64> = (0..arch.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        NetworkParams::from_flat(arch, &flat).unwrap()
    }

    #[test]
    fn prunes_smallest_magnitudes_globally() {
        // Weights {0.1, -0.5, 0.3, 0.05} split over two layers.
        let p = params_from_weights(array![[0.1, -0.5]], array![[0.3], [0.05]]);
        let m = magnitude_prune(&p, &Mask::ones(p.arch()), 0.5).unwrap();
        assert_eq!(m.layer(0), array![[0u8, 1]]);
        assert_eq!(m.layer(1), array![[1u8], [0]]);
    }

    #[test]
    fn ties_break_by_layer_then_index() {
        let p = params_from_weights(array![[1.0, 1.0]], array![[1.0], [1.0]]);
        let m = magnitude_prune(&p, &Mask::ones(p.arch()), 0.5).unwrap();
        assert_eq!(m.layer(0), array![[0u8, 0]]);
        assert_eq!(m.layer(1), array![[1u8], [1]]);
    }

    #[test]
    fn fraction_out_of_range() {
        let p = params_from_weights(array![[1.0]], array![[1.0]]);
        let ones = Mask::ones(p.arch());
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(magnitude_prune(&p, &ones, f).is_err());
        }
        assert!(one_shot_prune(&p, 0).is_err());
    }

    #[test]
    fn repeated_pruning_density_and_nesting() {
        let arch = ArchitectureSpec::mlp(20, &[30, 25], 10).unwrap();
        let total = arch.n_weights();
        for seed in 0..5 {
            let mut mask = Mask::ones(&arch);
            for level in 1..=6 {
                // Fresh random weights each level, as after retraining.
                let p = random_params(&arch, seed * 100 + level as u64);
                let next = magnitude_prune(&p, &mask, 0.2).unwrap();
                assert!(next.is_nested_in(&mask));
                mask = next;
                let target = 0.8f64.powi(level as i32) * total as f64;
                assert!((mask.kept() as f64 - target).abs() <= level as f64);
                assert_eq!(mask.kept(), imp_keep_count(total, level));
            }
        }
    }

    #[test]
    fn three_levels_reach_0_512() {
        let total = 10_000;
        let kept = imp_keep_count(total, 3);
        assert!((kept as f64 - 0.512 * total as f64).abs() <= 1.0);
        assert!((imp_keep_count(1_000_000, 12) as f64 / 1e6 - 0.8f64.powi(12)).abs() < 1e-5);
    }

    #[test]
    fn one_shot_matches_single_imp_step() {
        let arch = ArchitectureSpec::mlp(10, &[12], 4).unwrap();
        let p = random_params(&arch, 3);
        let ones = Mask::ones(&arch);
        assert_eq!(one_shot_prune(&p, 1).unwrap(), magnitude_prune(&p, &ones, 0.2).unwrap());
        let deep = one_shot_prune(&p, 12).unwrap();
        assert_eq!(deep.kept(), imp_keep_count(ones.total(), 12));
    }

    #[test]
    fn random_prune_counts_and_nesting() {
        let arch = ArchitectureSpec::mlp(10, &[12], 4).unwrap();
        let ones = Mask::ones(&arch);
        let m = random_prune(&ones, 0.5, 1).unwrap();
        assert_eq!(m.kept(), ones.total() - ones.total() / 2);
        assert_eq!(m, random_prune(&ones, 0.5, 1).unwrap());
        let m2 = random_prune(&m, 0.5, 2).unwrap();
        assert!(m2.is_nested_in(&m));
    }

    #[test]
    fn apply_mask_semantics() {
        let arch = ArchitectureSpec::new(4, vec![5], 3, true).unwrap();
        let p = random_params(&arch, 8);
        assert_eq!(Mask::ones(&arch).apply(&p).unwrap(), p);
        let m = one_shot_prune(&p, 3).unwrap();
        let q = apply_mask(&p, &m).unwrap();
        assert!(m.is_satisfied_by(&q));
        assert!(!m.is_satisfied_by(&p));
        assert_eq!(q.layers()[0].bias, p.layers()[0].bias);
        let wrong = Mask::ones(&ArchitectureSpec::mlp(4, &[6], 3).unwrap());
        assert!(wrong.apply(&p).is_err());
    }

    #[test]
    fn mask_permutation_commutes_with_weight_permutation() {
        let arch = ArchitectureSpec::new(6, vec![7, 5], 3, true).unwrap();
        let spec = build_mlp_spec(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..10 {
            let p = random_params(&arch, seed);
            let m = random_prune(&Mask::ones(&arch), 0.4, seed).unwrap();
            let perm = Permutation::random(&spec, &mut rng);
            let lhs = apply_permutation(&m.apply(&p).unwrap(), &spec, &perm).unwrap();
            let pm = permute_mask(&m, &spec, &perm).unwrap();
            let rhs = pm.apply(&apply_permutation(&p, &spec, &perm).unwrap()).unwrap();
            assert_eq!(lhs, rhs);
            // Magnitude masks are permutation-equivariant too.
            let mag = one_shot_prune(&p, 2).unwrap();
            let mag_of_permuted = one_shot_prune(&apply_permutation(&p, &spec, &perm).unwrap(), 2).unwrap();
            assert_eq!(mag_of_permuted.kept(), mag.kept());
        }
        assert_eq!(permute_mask(&Mask::ones(&arch), &spec, &Permutation::identity(&spec)).unwrap(), Mask::ones(&arch));
    }

    #[test]
    fn mask_file_round_trip() {
        let arch = ArchitectureSpec::mlp(4, &[3], 2).unwrap();
        let m = random_prune(&Mask::ones(&arch), 0.5, 3).unwrap();
        let c = m.to_container(2, "run-a");
        assert_eq!(c.metadata["level"], 2);
        assert_eq!(c.tensors[0].name, "m_W1");
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PMSK");
        let back = Mask::from_container(&Container::from_bytes(&bytes, MASK_MAGIC).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(Container::from_bytes(&bytes, crate::model::CHECKPOINT_MAGIC).is_err());
        assert!(Mask::new(vec![array![[2u8]]]).is_err());
    }
}
