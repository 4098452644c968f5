//! Layers and optimisers built on the autograd tape.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RunningStatUpdate, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::{ConvGeom, Tensor};

/// 2-D convolution with He-normal initialised weights.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!("{name}: zero channels ({in_channels} -> {out_channels})")));
        }
        let fan_in = in_channels * geom.kernel * geom.kernel;
        let w = Tensor::randn(
            vec![out_channels, in_channels, geom.kernel, geom.kernel],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        let weight = store.add(format!("{name}.weight"), w, group, ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_channels]), group, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self { weight, bias, geom, in_channels, out_channels })
    }

    /// A 1x1 convolution with bias.
    pub fn pointwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, in_channels, out_channels, ConvGeom::same(1, 1), true, group, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geom)
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.geom.kernel * self.geom.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Per-channel batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0), group, ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]), group, ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(vec![channels]), group, ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full(vec![channels], 1.0), group, ParamKind::Buffer)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        g.batch_norm(store, x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
    }

    /// Zeroes the affine shift so that a zero input maps to zero.
    pub fn zero_shift(&self, store: &mut ParamStore) {
        store.get_mut(self.beta).data_mut().fill(0.0);
    }
}

/// Conv -> BN -> ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeom,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, geom, false, group, rng)?;
        let bn = BatchNorm2d::new(store, &format!("{name}.bn"), out_channels, group)?;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.conv.param_count() + 2 * store.get(self.bn.gamma).numel()
    }
}

/// Folds observed batch statistics into the running estimates
/// (`running = (1 - momentum) * running + momentum * batch`).
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[RunningStatUpdate], momentum: f64) {
    for u in updates {
        for (id, batch) in [(u.mean_id, &u.mean), (u.var_id, &u.var)] {
            store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .zip(batch)
                .for_each(|(r, b)| *r = (1.0 - momentum) * *r + momentum * b);
        }
    }
}

/// Rescales `grads` in place so that their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        grads.iter_mut().for_each(|(_, g)| g.scale_assign(s));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64, weight_decay: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// Adam or momentum SGD with one learning rate per [`ParamGroup`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lrs: HashMap<ParamGroup, f64>,
    first: HashMap<ParamId, Tensor>,
    second: HashMap<ParamId, Tensor>,
    steps: HashMap<ParamId, u64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lrs: &[(ParamGroup, f64)]) -> Self {
        Self {
            kind,
            lrs: lrs.iter().copied().collect(),
            first: HashMap::new(),
            second: HashMap::new(),
            steps: HashMap::new(),
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        self.lrs.get(&group).copied().unwrap_or(0.0)
    }

    /// Applies one update; `lr_scale` multiplies every group's rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr_scale: f64) -> Result<()> {
        for (id, grad) in grads {
            let entry = store.entry(*id);
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            if entry.value.shape() != grad.shape() {
                return Err(Error::shape("Optimizer::step", format!("`{}`: {:?} vs {:?}", entry.name, entry.value.shape(), grad.shape())));
            }
            let lr = self.lr(entry.group) * lr_scale;
            if lr == 0.0 {
                continue;
            }
            let n = grad.numel();
            let shape = grad.shape().to_vec();
            match self.kind {
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let t = self.steps.entry(*id).or_insert(0);
                    *t += 1;
                    let (bc1, bc2) = (1.0 - beta1.powi(*t as i32), 1.0 - beta2.powi(*t as i32));
                    let m = self.first.entry(*id).or_insert_with(|| Tensor::zeros(shape.clone()));
                    let v = self.second.entry(*id).or_insert_with(|| Tensor::zeros(shape.clone()));
                    let p = store.get_mut(*id).data_mut();
                    for k in 0..n {
                        let gk = grad.data()[k];
                        let mk = &mut m.data_mut()[k];
                        *mk = beta1 * *mk + (1.0 - beta1) * gk;
                        let vk = &mut v.data_mut()[k];
                        *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                        p[k] -= lr * (*mk / bc1) / ((*vk / bc2).sqrt() + eps);
                    }
                }
                OptimizerKind::Sgd { momentum, weight_decay } => {
                    let buf = self.first.entry(*id).or_insert_with(|| Tensor::zeros(shape.clone()));
                    let p = store.get_mut(*id).data_mut();
                    for k in 0..n {
                        let gk = grad.data()[k] + weight_decay * p[k];
                        let bk = &mut buf.data_mut()[k];
                        *bk = momentum * *bk + gk;
                        p[k] -= lr * *bk;
                    }
                }
            }
        }
        Ok(())
    }
}
