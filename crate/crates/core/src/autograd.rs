//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the data its backward rule needs. [`Graph::backward`] then walks the tape
//! once in reverse. Graphs are cheap and meant to be rebuilt for every
//! forward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::{self, axis_extents, ConvGeom, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    LogClamped(Var, f64),
    Recip(Var),
    Clamp(Var, f64, f64),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool(Var, usize),
    Resize(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    BatchMatmul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, batch_stats: bool },
    L2Normalize { x: Var, norms: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<u8>, ignore: u8, probs: Tensor, count: usize },
    BerHu { r: Var, c: f64, argmax: Option<usize> },
    Cosine { x: Var, target: Tensor },
    Bce { p: Var, target: Tensor, weight: Tensor, eps: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode normalisation layer,
/// to be folded into its running estimates once the step is taken.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    /// Identity of the store the bound parameters come from.
    store: Option<u64>,
    train: bool,
    stat_updates: Vec<RunningStatUpdate>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(true)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(inner, channels)` layout of a `[N, C, ...]` tensor for per-channel ops.
fn channel_layout(op: &'static str, x: &Tensor, per_channel: &Tensor) -> Result<(usize, usize)> {
    if x.shape().len() < 2 || per_channel.numel() != x.shape()[1] {
        return Err(Error::shape(
            op,
            format!("per-channel tensor {:?} for input {:?}", per_channel.shape(), x.shape()),
        ));
    }
    Ok((x.shape()[2..].iter().product(), x.shape()[1]))
}

impl Graph {
    /// A new tape. `train` selects batch statistics in normalisation layers.
    pub fn new(train: bool) -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new(), store: None, train, stat_updates: Vec::new() }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    ///
    /// # Panics
    /// If parameters of two different stores are bound to one graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let uid = *self.store.get_or_insert(store.uid());
        assert_eq!(uid, store.uid(), "a graph binds parameters of a single ParamStore");
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = store.entry(id).kind == ParamKind::Trainable;
        let v = self.push(store.get(id).clone(), Op::Param, trainable);
        self.bound.insert(id, v);
        v
    }

    pub fn take_stat_updates(&mut self) -> Vec<RunningStatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(vb, |x, y| x + y).map_err(|_| Error::shape("add", format!("{:?} vs {:?}", va.shape(), vb.shape())))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(vb, |x, y| x - y).map_err(|_| Error::shape("sub", format!("{:?} vs {:?}", va.shape(), vb.shape())))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(vb, |x, y| x * y).map_err(|_| Error::shape("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        let (inner, c) = channel_layout("add_channel", vx, vb)?;
        let mut out = vx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bias = vb.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddChannel(x, b), ng))
    }

    /// `x[n, c, ...] * a[c]`, i.e. `diag(a)` applied channel-wise.
    pub fn mul_channel(&mut self, x: Var, a: Var) -> Result<Var> {
        let (vx, va) = (self.value(x), self.value(a));
        let (inner, c) = channel_layout("mul_channel", vx, va)?;
        let mut out = vx.clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let s = va.data()[i % c];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(x) || self.ng(a);
        Ok(self.push(out, Op::MulChannel(x, a), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn add_scalar(&mut self, x: Var, value: f64) -> Var {
        let out = self.value(x).map(|v| v + value);
        let ng = self.ng(x);
        self.push(out, Op::AddScalar(x), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // never yields -0.0, so zero residuals stay bit-exact downstream
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0) + (-v.abs()).exp().ln_1p(), Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `ln(max(x, eps))`.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| v.max(eps).ln(), Op::LogClamped(x, eps))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        if k == 1 {
            return Ok(x);
        }
        let out = tensor::avg_pool(self.value(x), k)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::AvgPool(x, k), ng))
    }

    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = tensor::resize_bilinear(self.value(x), h, w)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Resize(x), ng))
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let (_, _, h, w) = self.value(x).dims4()?;
        self.resize_bilinear(x, h * factor, w * factor)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let ref_shape = self.shape(*first).to_vec();
        if axis >= ref_shape.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {ref_shape:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != ref_shape.len()
                || s[..axis] != ref_shape[..axis]
                || s[axis + 1..] != ref_shape[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{s:?} vs {ref_shape:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&ref_shape, axis);
        let mut out_shape = ref_shape.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * dim + start) * inner..(o * dim + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let ng = self.ng(x);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Batched `op(a) @ op(b)` over rank-3 tensors, where `op` optionally
    /// transposes the two trailing axes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = match sa[..] {
            [n, r, c] => (n, if ta { c } else { r }, if ta { r } else { c }),
            _ => return Err(Error::shape("bmm", format!("lhs {sa:?} is not rank 3"))),
        };
        let (k2, n) = match sb[..] {
            [nb, r, c] if nb == batch => (if tb { c } else { r }, if tb { r } else { c }),
            _ => return Err(Error::shape("bmm", format!("rhs {sb:?} vs lhs {sa:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("bmm", format!("inner dims {k} vs {k2} ({sa:?} x {sb:?})")));
        }
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            tensor::gemm(m, k, n, &va[i * m * k..], ta, &vb[i * k * n..], tb, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let ng = self.ng(a) || self.ng(b);
        let out = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(out, Op::BatchMatmul { a, b, ta, tb }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Mean over the last axis, which is removed.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (&last, rest) = shape.split_last().ok_or_else(|| Error::shape("mean_last", "scalar input"))?;
        let data = self.value(x).data().chunks(last).map(|c| c.iter().sum::<f64>() / last as f64).collect();
        let ng = self.ng(x);
        let out = Tensor::new(rest.to_vec(), data)?;
        Ok(self.push(out, Op::MeanLast(x), ng))
    }

    /// Per-channel standardisation followed by an affine map.
    ///
    /// In training mode batch statistics are used and recorded for the
    /// running estimates; otherwise the stored running statistics are.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let inner = h * w;
        let count = (n * inner) as f64;
        let (mean, var) = if self.train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            let xv = self.value(x).data();
            for (i, chunk) in xv.chunks(inner).enumerate() {
                mean[i % c] += chunk.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for (i, chunk) in xv.chunks(inner).enumerate() {
                let m = mean[i % c];
                var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= count);
            self.stat_updates.push(RunningStatUpdate { mean_id: running_mean, var_id: running_var, mean: mean.clone(), var: var.clone() });
            (mean, var)
        } else {
            (store.get(running_mean).data().to_vec(), store.get(running_var).data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let mut xhat = self.value(x).clone();
        for (i, chunk) in xhat.data_mut().chunks_mut(inner).enumerate() {
            let (m, s) = (mean[i % c], inv_std[i % c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s);
        }
        let mut out = xhat.clone();
        let (gd, bd) = (self.value(gv).data().to_vec(), self.value(bv).data().to_vec());
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let (g, b) = (gd[i % c], bd[i % c]);
            chunk.iter_mut().for_each(|v| *v = *v * g + b);
        }
        let ng = self.ng(x) || self.ng(gv) || self.ng(bv);
        let batch_stats = self.train;
        Ok(self.push(out, Op::BatchNorm { x, gamma: gv, beta: bv, xhat, inv_std, batch_stats }, ng))
    }

    /// Normalises every pixel's channel vector to unit L2 norm.
    pub fn l2_normalize_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let p = h * w;
        let xv = self.value(x).data();
        let mut norms = vec![0.0; n * p];
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for i in 0..p {
                let sq: f64 = (0..c).map(|ch| xv[(b * c + ch) * p + i].powi(2)).sum();
                let norm = (sq + 1e-12).sqrt();
                norms[b * p + i] = norm;
                for ch in 0..c {
                    out[(b * c + ch) * p + i] = xv[(b * c + ch) * p + i] / norm;
                }
            }
        }
        let ng = self.ng(x);
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(out, Op::L2Normalize { x, norms }, ng))
    }

    /// Mean softmax cross-entropy of `[N, K, H, W]` logits against `N*H*W`
    /// labels, skipping `ignore`. Returns the loss and whether every pixel
    /// was ignored (in which case the loss is 0).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<(Var, bool)> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        let p = h * w;
        if labels.len() != n * p {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for {n}x{h}x{w} logits", labels.len())));
        }
        let probs = tensor::softmax(self.value(logits), 1)?;
        let pd = probs.data();
        let mut total = 0.0;
        let mut count = 0;
        for b in 0..n {
            for i in 0..p {
                let l = labels[b * p + i];
                if l == ignore {
                    continue;
                }
                if l as usize >= k {
                    return Err(Error::value("softmax_cross_entropy", format!("label {l} outside [0, {k})")));
                }
                total -= pd[(b * k + l as usize) * p + i].max(1e-300).ln();
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.ng(logits);
        let v = self.push(
            Tensor::scalar(value),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), ignore, probs, count },
            ng,
        );
        Ok((v, count == 0))
    }

    /// Mean reverse-Huber penalty of residuals `r`.
    ///
    /// With `threshold = None` the branch point is `c = 0.2 * max|r|`, and
    /// the gradient accounts for `c`'s dependence on the largest residual.
    pub fn berhu(&mut self, r: Var, threshold: Option<f64>) -> Result<Var> {
        let rv = self.value(r);
        if rv.numel() == 0 {
            return Err(Error::shape("berhu", "empty residual"));
        }
        let (c, argmax) = match threshold {
            Some(c) if c > 0.0 => (c, None),
            Some(c) => return Err(Error::value("berhu", format!("threshold {c} must be positive"))),
            None => {
                let (idx, m) = rv
                    .data()
                    .iter()
                    .enumerate()
                    .fold((0, 0.0f64), |(bi, bm), (i, v)| if v.abs() > bm { (i, v.abs()) } else { (bi, bm) });
                (0.2 * m, Some(idx))
            }
        };
        let value = if c == 0.0 {
            0.0
        } else {
            rv.data().iter().map(|&x| berhu_scalar(x, c)).sum::<f64>() / rv.numel() as f64
        };
        let ng = self.ng(r);
        Ok(self.push(Tensor::scalar(value), Op::BerHu { r, c, argmax }, ng))
    }

    /// Mean over pixels of `1 - cos(x, target)` along the channel axis.
    pub fn cosine_loss(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        same_shape("cosine_loss", xv, target)?;
        let (n, c, h, w) = xv.dims4()?;
        let p = h * w;
        let mut total = 0.0;
        for b in 0..n {
            for i in 0..p {
                let (mut dot, mut nx, mut nt) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let (a, t) = (xv.data()[(b * c + ch) * p + i], target.data()[(b * c + ch) * p + i]);
                    dot += a * t;
                    nx += a * a;
                    nt += t * t;
                }
                if nx == 0.0 || nt == 0.0 {
                    return Err(Error::value("cosine_loss", "zero-norm vector"));
                }
                total += 1.0 - dot / (nx.sqrt() * nt.sqrt());
            }
        }
        let value = total / (n * p) as f64;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(value), Op::Cosine { x, target: target.clone() }, ng))
    }

    /// Weighted binary cross-entropy on probabilities, averaged over all
    /// elements. Probabilities are clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor, weight: &Tensor, eps: f64) -> Result<Var> {
        let pv = self.value(p);
        same_shape("bce", pv, target)?;
        same_shape("bce", pv, weight)?;
        let total: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((&q, &t), &wt)| {
                let q = q.clamp(eps, 1.0 - eps);
                -wt * (t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        let value = total / pv.numel() as f64;
        let ng = self.ng(p);
        Ok(self.push(Tensor::scalar(value), Op::Bce { p, target: target.clone(), weight: weight.clone(), eps }, ng))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            for (v, t) in self.local_grads(node, &g)? {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            if keep {
                grads[i] = Some(g);
            }
        }
        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf | Op::Param => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![(*a, g.zip_map(val(*b), |x, y| x * y)?), (*b, g.zip_map(val(*a), |x, y| x * y)?)],
            Op::AddChannel(x, b) => {
                let (inner, c) = channel_layout("add_channel", val(*x), val(*b))?;
                let mut gb = vec![0.0; c];
                for (i, chunk) in g.data().chunks(inner).enumerate() {
                    gb[i % c] += chunk.iter().sum::<f64>();
                }
                vec![(*x, g.clone()), (*b, Tensor::new(val(*b).shape().to_vec(), gb)?)]
            }
            Op::MulChannel(x, a) => {
                let (xv, av) = (val(*x), val(*a));
                let (inner, c) = channel_layout("mul_channel", xv, av)?;
                let mut ga = vec![0.0; c];
                let mut gx = g.clone();
                for (i, (gc, xc)) in gx.data_mut().chunks_mut(inner).zip(xv.data().chunks(inner)).enumerate() {
                    ga[i % c] += gc.iter().zip(xc).map(|(p, q)| p * q).sum::<f64>();
                    let s = av.data()[i % c];
                    gc.iter_mut().for_each(|v| *v *= s);
                }
                vec![(*x, gx), (*a, Tensor::new(av.shape().to_vec(), ga)?)]
            }
            Op::Scale(x, f) => vec![(*x, g.map(|v| v * f))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)],
            Op::LeakyRelu(x, s) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { gv * s })?)],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(out, |gv, y| gv * y * (1.0 - y))?)],
            Op::Softplus(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| gv * sigmoid(xv))?)],
            Op::Exp(x) => vec![(*x, g.zip_map(out, |gv, y| gv * y)?)],
            Op::LogClamped(x, eps) => {
                vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > *eps { gv / xv } else { 0.0 })?)]
            }
            Op::Recip(x) => vec![(*x, g.zip_map(out, |gv, y| -gv * y * y)?)],
            Op::Clamp(x, lo, hi) => {
                vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 })?)]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = tensor::conv2d_backward(val(*x), val(*w), g, *geom, self.ng(*x))?;
                let mut res = vec![(*w, gw)];
                if let Some(gx) = gx {
                    res.push((*x, gx));
                }
                if let Some(b) = b {
                    res.push((*b, gb));
                }
                res
            }
            Op::AvgPool(x, k) => {
                let (_, _, h, w) = val(*x).dims4()?;
                vec![(*x, tensor::avg_pool_backward(g, *k, h, w)?)]
            }
            Op::Resize(x) => {
                let (_, _, h, w) = val(*x).dims4()?;
                vec![(*x, tensor::resize_bilinear_backward(g, h, w)?)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let shape = val(*p).shape().to_vec();
                    let len = shape[*axis];
                    let mut data = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        data.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                    }
                    offset += len;
                    res.push((*p, Tensor::new(shape, data)?));
                }
                res
            }
            Op::Narrow { x, axis, start } => {
                let shape = val(*x).shape().to_vec();
                let (outer, dim, inner) = axis_extents(&shape, *axis);
                let len = out.shape()[*axis];
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    gx.data_mut()[(o * dim + start) * inner..(o * dim + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape().to_vec())?)],
            Op::BatchMatmul { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let batch = va.shape()[0];
                let (m, n) = (out.shape()[1], out.shape()[2]);
                let k = va.numel() / (batch * m);
                let mut ga = vec![0.0; va.numel()];
                let mut gb = vec![0.0; vb.numel()];
                for i in 0..batch {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    let ai = &va.data()[i * m * k..(i + 1) * m * k];
                    let bi = &vb.data()[i * k * n..(i + 1) * k * n];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    if *ta {
                        tensor::gemm(k, n, m, bi, *tb, gi, true, gai, 0.0);
                    } else {
                        tensor::gemm(m, n, k, gi, false, bi, !*tb, gai, 0.0);
                    }
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if *tb {
                        tensor::gemm(n, m, k, gi, true, ai, *ta, gbi, 0.0);
                    } else {
                        tensor::gemm(k, m, n, ai, !*ta, gi, false, gbi, 0.0);
                    }
                }
                vec![(*a, Tensor::new(va.shape().to_vec(), ga)?), (*b, Tensor::new(vb.shape().to_vec(), gb)?)]
            }
            Op::Softmax { x, axis } => {
                let (outer, dim, inner) = axis_extents(out.shape(), *axis);
                let mut gx = vec![0.0; out.numel()];
                let (y, gd) = (out.data(), g.data());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * dim * inner + i;
                        let dot: f64 = (0..dim).map(|d| y[base + d * inner] * gd[base + d * inner]).sum();
                        for d in 0..dim {
                            let idx = base + d * inner;
                            gx[idx] = y[idx] * (gd[idx] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), gx)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).numel() as f64;
                vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item() / n))]
            }
            Op::MeanLast(x) => {
                let shape = val(*x).shape().to_vec();
                let last = *shape.last().unwrap_or(&1);
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / last as f64, last)).collect();
                vec![(*x, Tensor::new(shape, data)?)]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let (n, c, h, w) = xhat.dims4()?;
                let inner = h * w;
                let count = (n * inner) as f64;
                let gam = val(*gamma).data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for (i, (gc, xc)) in g.data().chunks(inner).zip(xhat.data().chunks(inner)).enumerate() {
                    gbeta[i % c] += gc.iter().sum::<f64>();
                    ggamma[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                }
                let mut gx = g.clone();
                for (i, (gc, xc)) in gx.data_mut().chunks_mut(inner).zip(xhat.data().chunks(inner)).enumerate() {
                    let ch = i % c;
                    let scale = gam[ch] * inv_std[ch];
                    if *batch_stats {
                        // d xhat-sums: sum(g*gamma) = gamma*gbeta, sum(g*gamma*xhat) = gamma*ggamma
                        let (mg, mgx) = (gbeta[ch] / count, ggamma[ch] / count);
                        gc.iter_mut().zip(xc).for_each(|(v, xh)| *v = scale * (*v - mg - xh * mgx));
                    } else {
                        gc.iter_mut().for_each(|v| *v *= scale);
                    }
                }
                vec![
                    (*x, gx),
                    (*gamma, Tensor::new(vec![c], ggamma)?),
                    (*beta, Tensor::new(vec![c], gbeta)?),
                ]
            }
            Op::L2Normalize { x, norms } => {
                let (n, c, h, w) = out.dims4()?;
                let p = h * w;
                let (y, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; y.len()];
                for b in 0..n {
                    for i in 0..p {
                        let dot: f64 = (0..c).map(|ch| y[(b * c + ch) * p + i] * gd[(b * c + ch) * p + i]).sum();
                        let norm = norms[b * p + i];
                        for ch in 0..c {
                            let idx = (b * c + ch) * p + i;
                            gx[idx] = (gd[idx] - y[idx] * dot) / norm;
                        }
                    }
                }
                vec![(*x, Tensor::new(out.shape().to_vec(), gx)?)]
            }
            Op::SoftmaxCrossEntropy { logits, labels, ignore, probs, count } => {
                let (n, k, h, w) = probs.dims4()?;
                let p = h * w;
                let mut gx = Tensor::zeros(probs.shape().to_vec());
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    let pd = probs.data();
                    let gd = gx.data_mut();
                    for b in 0..n {
                        for i in 0..p {
                            let l = labels[b * p + i];
                            if l == *ignore {
                                continue;
                            }
                            for ch in 0..k {
                                let idx = (b * k + ch) * p + i;
                                let onehot = if ch == l as usize { 1.0 } else { 0.0 };
                                gd[idx] = scale * (pd[idx] - onehot);
                            }
                        }
                    }
                }
                vec![(*logits, gx)]
            }
            Op::BerHu { r, c, argmax } => {
                let rv = val(*r);
                let scale = g.item() / rv.numel() as f64;
                let mut gr = rv.map(|x| if *c == 0.0 { 0.0 } else { scale * berhu_dr(x, *c) });
                if let (Some(idx), true) = (argmax, *c > 0.0) {
                    // c = 0.2 |r_max| moves with the largest residual
                    let dc: f64 = rv.data().iter().map(|&x| berhu_dc(x, *c)).sum();
                    gr.data_mut()[*idx] += scale * dc * 0.2 * rv.data()[*idx].signum();
                }
                vec![(*r, gr)]
            }
            Op::Cosine { x, target } => {
                let xv = val(*x);
                let (n, c, h, w) = xv.dims4()?;
                let p = h * w;
                let scale = g.item() / (n * p) as f64;
                let mut gx = vec![0.0; xv.numel()];
                for b in 0..n {
                    for i in 0..p {
                        let (mut dot, mut nx, mut nt) = (0.0, 0.0, 0.0);
                        for ch in 0..c {
                            let idx = (b * c + ch) * p + i;
                            dot += xv.data()[idx] * target.data()[idx];
                            nx += xv.data()[idx].powi(2);
                            nt += target.data()[idx].powi(2);
                        }
                        let (nx, nt) = (nx.sqrt(), nt.sqrt());
                        for ch in 0..c {
                            let idx = (b * c + ch) * p + i;
                            let d = target.data()[idx] / (nx * nt) - dot * xv.data()[idx] / (nx.powi(3) * nt);
                            gx[idx] = -scale * d;
                        }
                    }
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), gx)?)]
            }
            Op::Bce { p, target, weight, eps } => {
                let pv = val(*p);
                let scale = g.item() / pv.numel() as f64;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((&q, &t), &wt)| {
                        if q <= *eps || q >= 1.0 - eps {
                            0.0
                        } else {
                            scale * wt * (-t / q + (1.0 - t) / (1.0 - q))
                        }
                    })
                    .collect();
                vec![(*p, Tensor::new(pv.shape().to_vec(), data)?)]
            }
        })
    }
}

/// Reverse-Huber penalty with branch point `c`.
pub fn berhu_scalar(r: f64, c: f64) -> f64 {
    let a = r.abs();
    if a <= c {
        a
    } else {
        (r * r + c * c) / (2.0 * c)
    }
}

fn berhu_dr(r: f64, c: f64) -> f64 {
    if r.abs() <= c {
        r.signum() * if r == 0.0 { 0.0 } else { 1.0 }
    } else {
        r / c
    }
}

fn berhu_dc(r: f64, c: f64) -> f64 {
    if r.abs() <= c {
        0.0
    } else {
        0.5 - r * r / (2.0 * c * c)
    }
}

/// Result of [`Graph::backward`]: gradients of leaves and bound parameters.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter; `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.get(*v))
    }

    /// All parameter gradients, ordered by parameter id.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].take().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
