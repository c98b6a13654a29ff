//! Network representation: architecture, parameter bundles, forward
//! evaluation and linear interpolation between parameter points.
//!
//! A network with `K = hidden_dims.len() + 1` layers computes
//! `x_i = relu(norm_i(W_i x_{i-1} + b_i))` for the hidden layers and
//! `x_K = W_K x_{K-1} + b_K` at the output. `norm_i` is layer
//! normalization with a learned affine transform when enabled, identity
//! otherwise. Weights are stored `(out, in)` row-major.

mod container;
mod perm;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use container::{Container, Tensor, TensorData, CHECKPOINT_MAGIC, FORMAT_VERSION, MASK_MAGIC};
pub(crate) use perm::permute_axis;
pub use perm::{apply_permutation, build_mlp_spec, AxisTarget, PermGroup, Permutation, PermutationSpec};

/// Variance floor used inside layer normalization.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative evaluated from the activation's output.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub use_layer_norm: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchitectureSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, use_layer_norm: bool) -> Result<Self> {
        let arch = Self {
            input_dim,
            hidden_dims,
            output_dim,
            use_layer_norm,
            activation: Activation::Relu,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Convenience constructor for a plain MLP without normalization.
    pub fn mlp(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Result<Self> {
        Self::new(input_dim, hidden_dims.to_vec(), output_dim, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::InvalidArchitecture("at least one hidden layer is required".into()));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArchitecture("all dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Number of linear layers `K`.
    pub fn n_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(out, in)` of layer `i` (0-based).
    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        let dims = self.dims();
        (dims[i + 1], dims[i])
    }

    /// `[d_0, d_1, ..., d_K]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    pub fn has_norm(&self, layer: usize) -> bool {
        self.use_layer_norm && layer + 1 < self.n_layers()
    }

    pub fn n_weights(&self) -> usize {
        (0..self.n_layers())
            .map(|i| {
                let (o, n) = self.layer_shape(i);
                o * n
            })
            .sum()
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_layers())
            .map(|i| {
                let (o, n) = self.layer_shape(i);
                o * n + o + if self.has_norm(i) { 2 * o } else { 0 }
            })
            .sum()
    }
}

/// Identifies one parameter tensor. Layer indices are 0-based; the
/// serialized names are 1-based (`W1`, `b1`, `g1`, `s1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Weight(usize),
    Bias(usize),
    NormScale(usize),
    NormShift(usize),
}

impl ParamId {
    pub fn layer(self) -> usize {
        match self {
            ParamId::Weight(l) | ParamId::Bias(l) | ParamId::NormScale(l) | ParamId::NormShift(l) => l,
        }
    }

    pub fn name(self) -> String {
        match self {
            ParamId::Weight(l) => format!("W{}", l + 1),
            ParamId::Bias(l) => format!("b{}", l + 1),
            ParamId::NormScale(l) => format!("g{}", l + 1),
            ParamId::NormShift(l) => format!("s{}", l + 1),
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        let (kind, idx) = name.split_at(1.min(name.len()));
        let idx: usize = idx.parse().ok()?;
        if idx == 0 {
            return None;
        }
        let l = idx - 1;
        match kind {
            "W" => Some(ParamId::Weight(l)),
            "b" => Some(ParamId::Bias(l)),
            "g" => Some(ParamId::NormScale(l)),
            "s" => Some(ParamId::NormShift(l)),
            _ => None,
        }
    }

    pub fn rank(self) -> usize {
        match self {
            ParamId::Weight(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<LayerNormParams>,
}

/// Parameters of one MLP. Immutable by convention; every transformation
/// returns a new value.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    arch: ArchitectureSpec,
    layers: Vec<Layer>,
}

impl NetworkParams {
    pub fn new(arch: ArchitectureSpec, layers: Vec<Layer>) -> Result<Self> {
        arch.validate()?;
        if layers.len() != arch.n_layers() {
            return Err(Error::shape(format!("{} layers", arch.n_layers()), format!("{} layers", layers.len())));
        }
        for (i, layer) in layers.iter().enumerate() {
            let (o, n) = arch.layer_shape(i);
            if layer.weight.dim() != (o, n) {
                return Err(Error::shape(format!("W{} {o}x{n}", i + 1), format!("{:?}", layer.weight.dim())));
            }
            if layer.bias.len() != o {
                return Err(Error::shape(format!("b{} len {o}", i + 1), layer.bias.len()));
            }
            match (&layer.norm, arch.has_norm(i)) {
                (Some(norm), true) => {
                    if norm.scale.len() != o || norm.shift.len() != o {
                        return Err(Error::shape(format!("norm{} len {o}", i + 1), norm.scale.len()));
                    }
                }
                (None, false) => {}
                _ => return Err(Error::shape("norm parameters matching arch", format!("layer {}", i + 1))),
            }
        }
        let params = Self { arch, layers };
        if !params.is_finite() {
            return Err(Error::InvalidArgument("parameters contain non-finite values".into()));
        }
        Ok(params)
    }

    /// All-zero weights and biases; norm scale 1, shift 0.
    pub fn zeros(arch: &ArchitectureSpec) -> Self {
        Self::filled(arch, 0.0)
    }

    /// Every parameter (norm affine included) set to `value`.
    pub fn constant(arch: &ArchitectureSpec, value: f64) -> Self {
        let mut p = Self::filled(arch, value);
        for layer in &mut p.layers {
            if let Some(norm) = &mut layer.norm {
                norm.scale.fill(value);
            }
        }
        p
    }

    fn filled(arch: &ArchitectureSpec, value: f64) -> Self {
        let layers = (0..arch.n_layers())
            .map(|i| {
                let (o, n) = arch.layer_shape(i);
                Layer {
                    weight: Array2::from_elem((o, n), value),
                    bias: Array1::from_elem(o, value),
                    norm: arch.has_norm(i).then(|| LayerNormParams {
                        scale: Array1::ones(o),
                        shift: Array1::from_elem(o, value),
                    }),
                }
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Every tensor identifier in canonical order: per layer W, b, g, s.
    pub fn param_ids(&self) -> Vec<ParamId> {
        param_ids(&self.arch)
    }

    pub fn tensor(&self, id: ParamId) -> Option<ndarray::ArrayViewD<'_, f64>> {
        let layer = self.layers.get(id.layer())?;
        match id {
            ParamId::Weight(_) => Some(layer.weight.view().into_dyn()),
            ParamId::Bias(_) => Some(layer.bias.view().into_dyn()),
            ParamId::NormScale(_) => layer.norm.as_ref().map(|n| n.scale.view().into_dyn()),
            ParamId::NormShift(_) => layer.norm.as_ref().map(|n| n.shift.view().into_dyn()),
        }
    }

    pub(crate) fn tensor_mut(&mut self, id: ParamId) -> Option<ndarray::ArrayViewMutD<'_, f64>> {
        let layer = self.layers.get_mut(id.layer())?;
        match id {
            ParamId::Weight(_) => Some(layer.weight.view_mut().into_dyn()),
            ParamId::Bias(_) => Some(layer.bias.view_mut().into_dyn()),
            ParamId::NormScale(_) => layer.norm.as_mut().map(|n| n.scale.view_mut().into_dyn()),
            ParamId::NormShift(_) => layer.norm.as_mut().map(|n| n.shift.view_mut().into_dyn()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.param_ids()
            .into_iter()
            .all(|id| self.tensor(id).is_some_and(|t| t.iter().all(|v| v.is_finite())))
    }

    /// Concatenation of every tensor in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.n_params());
        for id in self.param_ids() {
            if let Some(t) = self.tensor(id) {
                out.extend(t.iter().copied());
            }
        }
        out
    }

    pub fn from_flat(arch: &ArchitectureSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.n_params() {
            return Err(Error::shape(arch.n_params(), flat.len()));
        }
        let mut p = Self::zeros(arch);
        let mut offset = 0;
        for id in p.param_ids() {
            let mut t = p.tensor_mut(id).expect("id from arch");
            let n = t.len();
            for (dst, src) in t.iter_mut().zip(&flat[offset..offset + n]) {
                *dst = *src;
            }
            offset += n;
        }
        if !p.is_finite() {
            return Err(Error::InvalidArgument("parameters contain non-finite values".into()));
        }
        Ok(p)
    }

    /// Elementwise combination of two bundles with identical architecture.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch);
        }
        let mut out = self.clone();
        for id in self.param_ids() {
            let b = other.tensor(id).expect("same arch");
            let mut t = out.tensor_mut(id).expect("same arch");
            Zip::from(&mut t).and(&b).for_each(|x, &y| *x = f(*x, y));
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for id in self.param_ids() {
            out.tensor_mut(id).expect("own id").mapv_inplace(&f);
        }
        out
    }

    /// Euclidean distance over every parameter.
    pub fn l2_distance(&self, other: &Self) -> Result<f64> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch);
        }
        let mut acc = 0.0;
        for id in self.param_ids() {
            let a = self.tensor(id).expect("own id");
            let b = other.tensor(id).expect("same arch");
            Zip::from(&a).and(&b).for_each(|x, y| acc += (x - y) * (x - y));
        }
        Ok(acc.sqrt())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.arch != other.arch {
            return Err(Error::ArchMismatch);
        }
        let mut m: f64 = 0.0;
        for id in self.param_ids() {
            let a = self.tensor(id).expect("own id");
            let b = other.tensor(id).expect("same arch");
            Zip::from(&a).and(&b).for_each(|x, y| m = m.max((x - y).abs()));
        }
        Ok(m)
    }

    /// Logits for a `(batch, input_dim)` matrix.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(inputs)?;
        let mut x = inputs.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(x.view(), layer);
            if i + 1 < self.layers.len() {
                if let Some(norm) = &layer.norm {
                    for mut row in z.rows_mut() {
                        layer_norm_row(&mut row, norm);
                    }
                }
                let act = self.arch.activation;
                z.mapv_inplace(|v| act.apply(v));
            }
            x = z;
        }
        Ok(x)
    }

    /// Post-activation outputs of every hidden layer, in depth order.
    pub fn hidden_activations(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        self.check_input(inputs)?;
        let mut out = Vec::with_capacity(self.layers.len() - 1);
        let mut x = inputs.to_owned();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut z = affine(x.view(), layer);
            if let Some(norm) = &layer.norm {
                for mut row in z.rows_mut() {
                    layer_norm_row(&mut row, norm);
                }
            }
            let act = self.arch.activation;
            z.mapv_inplace(|v| act.apply(v));
            out.push(z.clone());
            x = z;
        }
        Ok(out)
    }

    pub(crate) fn check_input(&self, inputs: ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.arch.input_dim {
            return Err(Error::shape(
                format!("input width {}", self.arch.input_dim),
                format!("input width {}", inputs.ncols()),
            ));
        }
        Ok(())
    }
}

pub fn param_ids(arch: &ArchitectureSpec) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for l in 0..arch.n_layers() {
        ids.push(ParamId::Weight(l));
        ids.push(ParamId::Bias(l));
        if arch.has_norm(l) {
            ids.push(ParamId::NormScale(l));
            ids.push(ParamId::NormShift(l));
        }
    }
    ids
}

/// `x W^T + b`.
pub(crate) fn affine(x: ArrayView2<'_, f64>, layer: &Layer) -> Array2<f64> {
    let mut z = x.dot(&layer.weight.t());
    z += &layer.bias;
    z
}

/// In-place layer normalization of one pre-activation row. Returns
/// `1 / sqrt(var + eps)` for the backward pass.
pub(crate) fn layer_norm_row(row: &mut ndarray::ArrayViewMut1<'_, f64>, norm: &LayerNormParams) -> f64 {
    let inv_std = normalize_row(row);
    Zip::from(row)
        .and(&norm.scale)
        .and(&norm.shift)
        .for_each(|v, &g, &s| *v = g * *v + s);
    inv_std
}

/// Standardizes a row in place (no affine); returns the inverse std.
pub(crate) fn normalize_row(row: &mut ndarray::ArrayViewMut1<'_, f64>) -> f64 {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + NORM_EPS).sqrt();
    row.mapv_inplace(|v| (v - mean) * inv_std);
    inv_std
}

/// `alpha * a + (1 - alpha) * b` over every parameter, norm affine included.
///
/// Evaluated as `b + alpha * (a - b)` so that equal inputs come back
/// unchanged; the endpoints return `a` and `b` exactly.
pub fn interpolate(a: &NetworkParams, b: &NetworkParams, alpha: f64) -> Result<NetworkParams> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if a.arch != b.arch {
        return Err(Error::ArchMismatch);
    }
    if alpha == 1.0 {
        return Ok(a.clone());
    }
    if alpha == 0.0 {
        return Ok(b.clone());
    }
    a.zip_with(b, |x, y| y + alpha * (x - y))
}

/// Row-wise argmax of a logits matrix; ties resolve to the lowest index.
pub fn argmax_rows(logits: ArrayView2<'_, f64>) -> Vec<usize> {
    logits.axis_iter(Axis(0)).map(argmax).collect()
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
