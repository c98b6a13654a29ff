//! Deterministic SGD training for MLPs.
//!
//! A run is strictly sequential: minibatch orders depend only on
//! `(data_order_seed, epoch)` and every reduction runs in a fixed order,
//! so identical inputs give bitwise-identical checkpoints.

mod config;

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{parse_key_values, Regime, Schedule, TrainConfig, CONFIG_KEYS};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    affine, normalize_row, ArchitectureSpec, Container, Layer, LayerNormParams, NetworkParams, ParamId, Tensor,
    TensorData, CHECKPOINT_MAGIC,
};
use crate::sparsity::Mask;

/// He-normal weights (`N(0, 2 / fan_in)`), zero biases, unit norm scale,
/// zero norm shift.
pub fn init_params(arch: &ArchitectureSpec, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..arch.n_layers())
        .map(|i| {
            let (o, n) = arch.layer_shape(i);
            let normal = Normal::new(0.0, (2.0 / n as f64).sqrt()).expect("positive std");
            let weight = Array2::from_shape_simple_fn((o, n), || normal.sample(&mut rng));
            Layer {
                weight,
                bias: Array1::zeros(o),
                norm: arch.has_norm(i).then(|| LayerNormParams {
                    scale: Array1::ones(o),
                    shift: Array1::zeros(o),
                }),
            }
        })
        .collect();
    NetworkParams::new(arch.clone(), layers).expect("shapes follow arch")
}

/// Mean softmax cross-entropy and the number of misclassified rows.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, usize) {
    let mut total = 0.0;
    let mut wrong = 0;
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
        if crate::model::argmax_rows(row.insert_axis(Axis(0)))[0] != y {
            wrong += 1;
        }
    }
    (total / labels.len() as f64, wrong)
}

struct HiddenTrace {
    /// Normalized pre-activations (before the affine transform).
    normalized: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    /// Post-activation output.
    output: Array2<f64>,
}

/// Mean cross-entropy over the batch and its exact gradient, returned as a
/// parameter-shaped bundle.
pub fn grad(params: &NetworkParams, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, NetworkParams)> {
    params.check_input(x)?;
    if x.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::shape(format!("{} labels", x.nrows()), labels.len()));
    }
    let arch = params.arch();
    if let Some(&bad) = labels.iter().find(|&&y| y >= arch.output_dim) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{}", arch.output_dim)));
    }
    let layers = params.layers();
    let k = layers.len();
    let act = arch.activation;

    let mut traces: Vec<HiddenTrace> = Vec::with_capacity(k - 1);
    for (i, layer) in layers[..k - 1].iter().enumerate() {
        let input = if i == 0 { x.view() } else { traces[i - 1].output.view() };
        let mut z = affine(input, layer);
        let (normalized, inv_std) = match &layer.norm {
            Some(norm) => {
                let mut inv = Array1::zeros(z.nrows());
                for (r, mut row) in z.rows_mut().into_iter().enumerate() {
                    inv[r] = normalize_row(&mut row);
                }
                let zhat = z.clone();
                Zip::from(z.rows_mut()).for_each(|mut row| {
                    Zip::from(&mut row)
                        .and(&norm.scale)
                        .and(&norm.shift)
                        .for_each(|v, &g, &s| *v = g * *v + s);
                });
                (Some(zhat), Some(inv))
            }
            None => (None, None),
        };
        z.mapv_inplace(|v| act.apply(v));
        traces.push(HiddenTrace {
            normalized,
            inv_std,
            output: z,
        });
    }
    let last_input = if k == 1 { x.view() } else { traces[k - 2].output.view() };
    let logits = affine(last_input, &layers[k - 1]);
    let n = labels.len() as f64;
    let (loss, _) = cross_entropy(logits.view(), labels);

    // d loss / d logits = (softmax - onehot) / n
    let mut delta = logits;
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s / n);
        row[y] -= 1.0 / n;
    }

    let mut g = NetworkParams::zeros(arch);
    for i in (0..k).rev() {
        let input = if i == 0 { x.view() } else { traces[i - 1].output.view() };
        if i < k - 1 {
            let trace = &traces[i];
            let act_out = &trace.output;
            Zip::from(&mut delta)
                .and(act_out)
                .for_each(|d, &y| *d *= act.derivative_from_output(y));
            if let (Some(norm), Some(zhat), Some(inv)) = (&layers[i].norm, &trace.normalized, &trace.inv_std) {
                let gn = g.layers_mut()[i].norm.as_mut().expect("arch has norm");
                gn.scale = (&delta * zhat).sum_axis(Axis(0));
                gn.shift = delta.sum_axis(Axis(0));
                let width = delta.ncols() as f64;
                for ((mut drow, zrow), &inv_std) in delta.rows_mut().into_iter().zip(zhat.rows()).zip(inv) {
                    Zip::from(&mut drow).and(&norm.scale).for_each(|d, &gamma| *d *= gamma);
                    let mean_d = drow.sum() / width;
                    let mean_dz = drow.iter().zip(zrow).map(|(a, b)| a * b).sum::<f64>() / width;
                    Zip::from(&mut drow)
                        .and(&zrow)
                        .for_each(|d, &zh| *d = inv_std * (*d - mean_d - zh * mean_dz));
                }
            }
        }
        let gl = &mut g.layers_mut()[i];
        gl.weight = delta.t().dot(&input);
        gl.bias = delta.sum_axis(Axis(0));
        if i > 0 {
            delta = delta.dot(&layers[i].weight);
        }
    }
    Ok((loss, g))
}

/// Network state after some number of epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub epoch: usize,
    pub fingerprint: u64,
    pub init_seed: u64,
    pub regime: Regime,
    /// Momentum buffers, kept for exact resumption.
    pub momentum: Option<NetworkParams>,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let arch = self.params.arch();
        let metadata = serde_json::json!({
            "arch": arch,
            "epoch": self.epoch,
            "seed": self.init_seed,
            "regime": self.regime.name(),
            "fingerprint": format!("{:016x}", self.fingerprint),
        });
        let mut tensors = tensors_of(&self.params, "");
        if let Some(m) = &self.momentum {
            tensors.extend(tensors_of(m, "m"));
        }
        Container {
            magic: CHECKPOINT_MAGIC,
            metadata,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes, CHECKPOINT_MAGIC)?;
        let meta = &c.metadata;
        let arch: ArchitectureSpec = serde_json::from_value(meta["arch"].clone())?;
        arch.validate()?;
        let epoch = meta["epoch"]
            .as_u64()
            .ok_or_else(|| Error::Format("checkpoint metadata lacks epoch".into()))? as usize;
        let init_seed = meta["seed"].as_u64().unwrap_or(0);
        let regime = meta["regime"].as_str().unwrap_or("standard").parse()?;
        let fingerprint = meta["fingerprint"]
            .as_str()
            .and_then(|s| u64::from_str_radix(s, 16).ok())
            .unwrap_or(0);
        let params = params_from(&c, &arch, "")?.ok_or_else(|| Error::Format("checkpoint has no W1".into()))?;
        let momentum = params_from(&c, &arch, "m")?;
        Ok(Self {
            params,
            epoch,
            fingerprint,
            init_seed,
            regime,
            momentum,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn tensors_of(params: &NetworkParams, prefix: &str) -> Vec<Tensor> {
    params
        .param_ids()
        .into_iter()
        .map(|id| {
            let t = params.tensor(id).expect("own id");
            Tensor {
                name: format!("{prefix}{}", id.name()),
                dims: t.shape().to_vec(),
                data: TensorData::F32(t.iter().map(|&v| v as f32).collect()),
            }
        })
        .collect()
}

fn params_from(c: &Container, arch: &ArchitectureSpec, prefix: &str) -> Result<Option<NetworkParams>> {
    if c.tensor(&format!("{prefix}W1")).is_none() {
        return Ok(None);
    }
    let mut flat = Vec::with_capacity(arch.n_params());
    for id in crate::model::param_ids(arch) {
        let name = format!("{prefix}{}", id.name());
        let t = c.tensor(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        let expect = expected_dims(arch, id);
        if t.dims != expect {
            return Err(Error::Format(format!("tensor {name} has dims {:?}, expected {expect:?}", t.dims)));
        }
        match &t.data {
            TensorData::F32(v) => flat.extend(v.iter().map(|&x| f64::from(x))),
            TensorData::U8(_) => return Err(Error::Format(format!("tensor {name} is not float32"))),
        }
    }
    NetworkParams::from_flat(arch, &flat).map(Some)
}

fn expected_dims(arch: &ArchitectureSpec, id: ParamId) -> Vec<usize> {
    let (o, n) = arch.layer_shape(id.layer());
    match id {
        ParamId::Weight(_) => vec![o, n],
        _ => vec![o],
    }
}

/// Checkpoints of one run in epoch order; the last is the final state.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub checkpoints: Vec<Checkpoint>,
}

impl TrainRun {
    pub fn at_epoch(&self, epoch: usize) -> Result<&Checkpoint> {
        self.checkpoints
            .iter()
            .find(|c| c.epoch == epoch)
            .ok_or(Error::MissingCheckpoint(epoch))
    }

    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("a run always has a final checkpoint")
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.checkpoints.iter().map(|c| c.epoch).collect()
    }
}

/// Where to resume a run from.
#[derive(Clone, Debug)]
pub struct StartState {
    pub params: NetworkParams,
    pub momentum: Option<NetworkParams>,
    pub epoch: usize,
}

/// Trains from initialization through `config.epochs`.
pub fn train(config: &TrainConfig, data: &Dataset, mask: Option<&Mask>) -> Result<TrainRun> {
    config.validate()?;
    let start = StartState {
        params: init_params(&config.arch, config.init_seed),
        momentum: None,
        epoch: 0,
    };
    train_from(config, data, start, mask)
}

/// Continues training from `start.epoch` through `config.epochs`. Emits a
/// checkpoint for every requested epoch in range plus the final one.
pub fn train_from(config: &TrainConfig, data: &Dataset, start: StartState, mask: Option<&Mask>) -> Result<TrainRun> {
    config.validate()?;
    if start.params.arch() != &config.arch {
        return Err(Error::ArchMismatch);
    }
    if data.dim() != config.arch.input_dim {
        return Err(Error::shape(format!("data width {}", config.arch.input_dim), data.dim()));
    }
    if data.n_classes() > config.arch.output_dim {
        return Err(Error::shape(
            format!("at most {} classes", config.arch.output_dim),
            data.n_classes(),
        ));
    }
    if start.epoch > config.epochs {
        return Err(Error::MissingCheckpoint(start.epoch));
    }
    if let Some(m) = mask {
        m.check_arch(&config.arch)?;
    }

    let fingerprint = config.fingerprint();
    let snapshot = |params: &NetworkParams, momentum: &NetworkParams, epoch: usize| Checkpoint {
        params: params.clone(),
        epoch,
        fingerprint,
        init_seed: config.init_seed,
        regime: config.regime,
        momentum: Some(momentum.clone()),
    };

    let mut params = start.params;
    if let Some(m) = mask {
        params = m.apply(&params)?;
    }
    let mut velocity = start.momentum.unwrap_or_else(|| params.map(|_| 0.0));
    let spe = config.steps_per_epoch(data.len());
    let mut checkpoints = Vec::new();
    if config.checkpoint_epochs.contains(&start.epoch) || start.epoch == config.epochs {
        checkpoints.push(snapshot(&params, &velocity, start.epoch));
    }
    let ids = params.param_ids();

    for epoch in start.epoch..config.epochs {
        let epoch_start = snapshot(&params, &velocity, epoch);
        for (b, idx) in batches(data.len(), config.batch_size, config.data_order_seed, epoch)
            .iter()
            .enumerate()
        {
            let (x, y) = data.gather(idx);
            let (loss, g) = grad(&params, x.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(epoch_start),
                });
            }
            let lr = config.lr_at(epoch * spe + b, spe);
            sgd_step(&mut params, &mut velocity, &g, &ids, lr, config.momentum, config.weight_decay, mask);
        }
        if !params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_good: Box::new(epoch_start),
            });
        }
        let done = epoch + 1;
        if config.checkpoint_epochs.contains(&done) || done == config.epochs {
            checkpoints.push(snapshot(&params, &velocity, done));
        }
    }
    Ok(TrainRun {
        config: config.clone(),
        checkpoints,
    })
}

/// SGD with momentum and L2 weight decay folded into the gradient. Pruned
/// coordinates have their gradient and momentum zeroed and stay at 0.
#[allow(clippy::too_many_arguments)]
fn sgd_step(
    params: &mut NetworkParams,
    velocity: &mut NetworkParams,
    g: &NetworkParams,
    ids: &[ParamId],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    mask: Option<&Mask>,
) {
    for &id in ids {
        let gt = g.tensor(id).expect("same arch");
        let mut w = params.tensor_mut(id).expect("same arch");
        let mut v = velocity.tensor_mut(id).expect("same arch");
        Zip::from(&mut w).and(&mut v).and(&gt).for_each(|w, v, &g| {
            let g = g + weight_decay * *w;
            *v = momentum * *v + g;
            *w -= lr * *v;
        });
        if let (ParamId::Weight(l), Some(m)) = (id, mask) {
            let keep = m.layer(l);
            let w2 = w.into_dimensionality::<ndarray::Ix2>().expect("weight is 2-D");
            let v2 = v.into_dimensionality::<ndarray::Ix2>().expect("weight is 2-D");
            Zip::from(w2).and(v2).and(keep).for_each(|w, v, &k| {
                if k == 0 {
                    *w = 0.0;
                    *v = 0.0;
                }
            });
        }
    }
}

/// Resumes the run at `parent` once per seed with that seed as the
/// minibatch-order seed; everything else is shared. Returns the final
/// checkpoint of every child.
pub fn spawn_children(
    config: &TrainConfig,
    data: &Dataset,
    parent: &Checkpoint,
    seeds: &[u64],
    mask: Option<&Mask>,
) -> Result<Vec<Checkpoint>> {
    seeds
        .iter()
        .map(|&seed| {
            let child_cfg = TrainConfig {
                data_order_seed: seed,
                checkpoint_epochs: Default::default(),
                ..config.clone()
            };
            let start = StartState {
                params: parent.params.clone(),
                momentum: parent.momentum.clone(),
                epoch: parent.epoch,
            };
            let run = train_from(&child_cfg, data, start, mask)?;
            Ok(run.final_checkpoint().clone())
        })
        .collect()
}
