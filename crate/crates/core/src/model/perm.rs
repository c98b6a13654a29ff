//! Permutation specs, concrete permutations and their action on parameters.
//!
//! Convention: permuting an axis by `pi` maps `new[r] = old[pi[r]]`. With
//! this convention `compose(p, q)` applies `q` first, then `p`.

use std::fmt::Write as _;
use std::hash::Hasher;

use fnv::FnvHasher;
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{ArchitectureSpec, NetworkParams, ParamId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AxisTarget {
    pub param: ParamId,
    pub axis: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermGroup {
    pub size: usize,
    pub targets: Vec<AxisTarget>,
}

/// Which parameter axes each permutable index group acts on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationSpec {
    groups: Vec<PermGroup>,
}

impl PermutationSpec {
    pub fn new(groups: Vec<PermGroup>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for g in &groups {
            if g.size == 0 {
                return Err(Error::SpecMismatch("group of size 0".into()));
            }
            for t in &g.targets {
                if t.axis >= t.param.rank() {
                    return Err(Error::SpecMismatch(format!("{} has no axis {}", t.param.name(), t.axis)));
                }
                if !seen.insert(*t) {
                    return Err(Error::SpecMismatch(format!("{}:{} targeted twice", t.param.name(), t.axis)));
                }
            }
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[PermGroup] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.size).collect()
    }

    /// One line per group: `group=<i> size=<d> targets=W1:0,b1:0,...`.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (i, g) in self.groups.iter().enumerate() {
            let targets: Vec<String> = g.targets.iter().map(|t| format!("{}:{}", t.param.name(), t.axis)).collect();
            let _ = writeln!(s, "group={i} size={} targets={}", g.size, targets.join(","));
        }
        s
    }

    /// 64-bit FNV-1a of [`Self::canonical`].
    pub fn hash(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write(self.canonical().as_bytes());
        h.finish()
    }

    /// Checks that every target exists in `params` with the group's size.
    pub fn check_params(&self, params: &NetworkParams) -> Result<()> {
        for (gi, g) in self.groups.iter().enumerate() {
            for t in &g.targets {
                let tensor = params
                    .tensor(t.param)
                    .ok_or_else(|| Error::SpecMismatch(format!("network has no parameter {}", t.param.name())))?;
                if tensor.shape()[t.axis] != g.size {
                    return Err(Error::SpecMismatch(format!(
                        "group {gi}: {} axis {} has length {}, expected {}",
                        t.param.name(),
                        t.axis,
                        tensor.shape()[t.axis],
                        g.size
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One group per hidden layer. Group `i` permutes the rows of `W_i`, `b_i`,
/// the norm affine parameters of layer `i`, and the columns of `W_{i+1}`.
/// The input and output axes are never permuted.
pub fn build_mlp_spec(arch: &ArchitectureSpec) -> PermutationSpec {
    let groups = arch
        .hidden_dims
        .iter()
        .enumerate()
        .map(|(l, &size)| {
            let mut targets = vec![
                AxisTarget {
                    param: ParamId::Weight(l),
                    axis: 0,
                },
                AxisTarget {
                    param: ParamId::Bias(l),
                    axis: 0,
                },
            ];
            if arch.use_layer_norm {
                targets.push(AxisTarget {
                    param: ParamId::NormScale(l),
                    axis: 0,
                });
                targets.push(AxisTarget {
                    param: ParamId::NormShift(l),
                    axis: 0,
                });
            }
            targets.push(AxisTarget {
                param: ParamId::Weight(l + 1),
                axis: 1,
            });
            PermGroup { size, targets }
        })
        .collect();
    PermutationSpec { groups }
}

/// Per-group index vectors.
#[derive(Clone, Debug, PartialEq, Eq, Hash, serde::Serialize)]
pub struct Permutation {
    groups: Vec<Vec<usize>>,
}

impl Permutation {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        for (gi, g) in groups.iter().enumerate() {
            check_bijection(g).map_err(|e| Error::InvalidPermutation(format!("group {gi}: {e}")))?;
        }
        Ok(Self { groups })
    }

    pub fn identity(spec: &PermutationSpec) -> Self {
        Self::identity_for_sizes(&spec.sizes())
    }

    pub fn identity_for_sizes(sizes: &[usize]) -> Self {
        Self {
            groups: sizes.iter().map(|&d| (0..d).collect()).collect(),
        }
    }

    /// Uniformly random permutation for every group.
    pub fn random<R: Rng + ?Sized>(spec: &PermutationSpec, rng: &mut R) -> Self {
        let mut p = Self::identity(spec);
        for g in &mut p.groups {
            g.shuffle(rng);
        }
        p
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub(crate) fn set_group(&mut self, i: usize, perm: Vec<usize>) {
        debug_assert_eq!(self.groups[i].len(), perm.len());
        self.groups[i] = perm;
    }

    pub fn is_identity(&self) -> bool {
        self.groups.iter().all(|g| g.iter().enumerate().all(|(i, &v)| i == v))
    }

    pub fn conforms_to(&self, spec: &PermutationSpec) -> Result<()> {
        if self.sizes() != spec.sizes() {
            return Err(Error::SpecMismatch(format!(
                "permutation sizes {:?} do not match spec sizes {:?}",
                self.sizes(),
                spec.sizes()
            )));
        }
        Ok(())
    }

    /// Applying the result equals applying `q` first, then `self`.
    pub fn compose(&self, q: &Permutation) -> Result<Permutation> {
        if self.sizes() != q.sizes() {
            return Err(Error::SpecMismatch("composing permutations of different shapes".into()));
        }
        let groups = self
            .groups
            .iter()
            .zip(&q.groups)
            .map(|(p, q)| p.iter().map(|&i| q[i]).collect())
            .collect();
        Ok(Permutation { groups })
    }

    pub fn invert(&self) -> Permutation {
        let groups = self
            .groups
            .iter()
            .map(|p| {
                let mut inv = vec![0; p.len()];
                for (i, &v) in p.iter().enumerate() {
                    inv[v] = i;
                }
                inv
            })
            .collect();
        Permutation { groups }
    }

    /// Text form: a `PMPERM v1 spec_hash=<hex>` header, then one
    /// `group=<i> size=<d> perm=<indices>` line per group.
    pub fn to_text(&self, spec: &PermutationSpec) -> Result<String> {
        self.conforms_to(spec)?;
        let mut s = format!("PMPERM v1 spec_hash={:016x}\n", spec.hash());
        for (i, g) in self.groups.iter().enumerate() {
            let idx: Vec<String> = g.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "group={i} size={} perm={}", g.len(), idx.join(","));
        }
        Ok(s)
    }

    pub fn from_text(text: &str, spec: &PermutationSpec) -> Result<Permutation> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty permutation file".into()))?;
        let hash_hex = header
            .strip_prefix("PMPERM v1 spec_hash=")
            .ok_or_else(|| Error::Format(format!("bad permutation header: {header:?}")))?;
        let hash = u64::from_str_radix(hash_hex.trim(), 16).map_err(|e| Error::Format(format!("bad spec hash: {e}")))?;
        if hash != spec.hash() {
            return Err(Error::SpecMismatch(format!(
                "permutation file spec hash {hash:016x} does not match {:016x}",
                spec.hash()
            )));
        }
        let mut groups = Vec::new();
        for (expect, line) in lines.enumerate() {
            let mut fields = line.split_whitespace();
            let (Some(g), Some(size), Some(perm), None) = (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::Format(format!("bad permutation line: {line:?}")));
            };
            let parse_kv = |field: &str, key: &str| -> Result<String> {
                field
                    .strip_prefix(key)
                    .map(str::to_owned)
                    .ok_or_else(|| Error::Format(format!("expected {key} in {line:?}")))
            };
            let gi: usize = parse_kv(g, "group=")?
                .parse()
                .map_err(|_| Error::Format(format!("bad group index in {line:?}")))?;
            let size: usize = parse_kv(size, "size=")?
                .parse()
                .map_err(|_| Error::Format(format!("bad size in {line:?}")))?;
            if gi != expect {
                return Err(Error::Format(format!("expected group {expect}, found {gi}")));
            }
            let perm = parse_kv(perm, "perm=")?;
            let idx = perm
                .split(',')
                .map(|v| v.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| Error::Format(format!("bad index list in {line:?}")))?;
            if idx.len() != size {
                return Err(Error::Format(format!("group {gi}: size={size} but {} indices", idx.len())));
            }
            groups.push(idx);
        }
        let p = Permutation::new(groups)?;
        p.conforms_to(spec)?;
        Ok(p)
    }
}

fn check_bijection(p: &[usize]) -> std::result::Result<(), String> {
    let mut seen = vec![false; p.len()];
    for &v in p {
        if v >= p.len() {
            return Err(format!("index {v} out of range 0..{}", p.len()));
        }
        if std::mem::replace(&mut seen[v], true) {
            return Err(format!("index {v} repeated"));
        }
    }
    Ok(())
}

/// Relabels hidden units: `W'_i = P_i W_i P_{i-1}^T`, `b'_i = P_i b_i`, with
/// the norm affine parameters following their layer's permutation.
pub fn apply_permutation(params: &NetworkParams, spec: &PermutationSpec, perm: &Permutation) -> Result<NetworkParams> {
    perm.conforms_to(spec)?;
    for (gi, g) in perm.groups.iter().enumerate() {
        check_bijection(g).map_err(|e| Error::InvalidPermutation(format!("group {gi}: {e}")))?;
    }
    spec.check_params(params)?;
    let mut out = params.clone();
    for (group, p) in spec.groups.iter().zip(&perm.groups) {
        if p.iter().enumerate().all(|(i, &v)| i == v) {
            continue;
        }
        for t in &group.targets {
            permute_axis(&mut out, t.param, t.axis, p);
        }
    }
    Ok(out)
}

pub(crate) fn permute_axis(params: &mut NetworkParams, id: ParamId, axis: usize, perm: &[usize]) {
    let mut t = params.tensor_mut(id).expect("checked against spec");
    let permuted = t.select(Axis(axis), perm);
    t.assign(&permuted);
}
