//! Cross-task attention (xTAM), the multi-task exchange block (mTEB) and
//! the PAD-Net style self-attention distillation baseline.
//!
//! Direction naming: the xTAM `j -> i` refines task `i` with a message
//! extracted from task `j`. Queries come from `f_i`, keys and values from
//! `f_j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::params::{ParamGroup, ParamId, ParamKind, ParamStore};
use crate::tensor::{ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    #[default]
    Spatial,
    Channel,
    /// Channel attention followed by spatial attention.
    Both,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Spatial, AttentionKind::Channel, AttentionKind::Both];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Spatial => "spatial",
            AttentionKind::Channel => "channel",
            AttentionKind::Both => "both",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[default]
    Add,
    Concat,
    /// `f * (1 + r)`, which keeps a zero residual an identity.
    Prod,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Concat, FusionKind::Prod, FusionKind::Add];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::Concat => "concat",
            FusionKind::Prod => "prod",
        }
    }
}

/// Hyper-parameters shared by every xTAM of a block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XtamConfig {
    /// Projection size `d`; `None` selects `max(c / 8, 8)`.
    pub proj_dim: Option<usize>,
    /// Downscale factor `s`.
    pub downscale: usize,
    pub attention: AttentionKind,
    pub self_attention: bool,
}

impl Default for XtamConfig {
    fn default() -> Self {
        Self { proj_dim: None, downscale: 2, attention: AttentionKind::Spatial, self_attention: true }
    }
}

impl XtamConfig {
    pub fn proj_dim_for(&self, channels: usize) -> usize {
        self.proj_dim.unwrap_or((channels / 8).max(8))
    }
}

/// The three 1x1 projections of one attention stage.
#[derive(Clone, Debug)]
pub struct Projections {
    /// Applied to `f_i`; produces queries.
    pub query: Conv2d,
    /// Applied to `f_j`; produces keys.
    pub key: Conv2d,
    pub value: Conv2d,
}

impl Projections {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, d: usize, rng: &mut R) -> Result<Self> {
        let g = ParamGroup::Decoder;
        Ok(Self {
            query: Conv2d::pointwise(store, &format!("{name}.query"), c, d, g, rng)?,
            key: Conv2d::pointwise(store, &format!("{name}.key"), c, d, g, rng)?,
            value: Conv2d::pointwise(store, &format!("{name}.value"), c, c, g, rng)?,
        })
    }

    fn ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value]
            .iter()
            .flat_map(|c| std::iter::once(c.weight).chain(c.bias))
            .collect()
    }
}

/// Gated feature map `F_f(f) * sigmoid(F_m(f))` with 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub feat: Conv2d,
    pub mask: Conv2d,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Result<Self> {
        let g = ParamGroup::Decoder;
        let geom = ConvGeom::same(3, 1);
        Ok(Self {
            feat: Conv2d::new(store, &format!("{name}.feat"), c, c, geom, true, g, rng)?,
            mask: Conv2d::new(store, &format!("{name}.mask"), c, c, geom, true, g, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let feat = self.feat.forward(g, store, f)?;
        let mask = self.mask.forward(g, store, f)?;
        let gate = g.sigmoid(mask);
        g.mul(feat, gate)
    }
}

/// One direction `j -> i` of a cross-task attention module.
#[derive(Clone, Debug)]
pub struct Xtam {
    pub channels: usize,
    pub config: XtamConfig,
    pub spatial: Option<Projections>,
    pub channel: Option<Projections>,
    /// Channel gate `alpha`, one scalar per channel, initialised to zero.
    pub gate: ParamId,
    pub self_attn: Option<SelfAttention>,
}

impl Xtam {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: &XtamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.downscale == 0 {
            return Err(Error::Config("xTAM downscale must be positive".into()));
        }
        if config.proj_dim == Some(0) {
            return Err(Error::Config("xTAM projection size must be positive".into()));
        }
        let d = config.proj_dim_for(channels);
        let spatial = match config.attention {
            AttentionKind::Spatial | AttentionKind::Both => Some(Projections::new(store, &format!("{name}.spatial"), channels, d, rng)?),
            AttentionKind::Channel => None,
        };
        let channel = match config.attention {
            AttentionKind::Channel | AttentionKind::Both => {
                Some(Projections::new(store, &format!("{name}.channel"), channels, channels, rng)?)
            }
            AttentionKind::Spatial => None,
        };
        let gate = store.add(format!("{name}.gate"), Tensor::zeros(vec![channels]), ParamGroup::Decoder, ParamKind::Trainable)?;
        let self_attn = if config.self_attention {
            Some(SelfAttention::new(store, &format!("{name}.self"), channels, rng)?)
        } else {
            None
        };
        Ok(Self { channels, config: config.clone(), spatial, channel, gate, self_attn })
    }

    /// Channels of the directional feature.
    pub fn out_channels(&self) -> usize {
        if self.self_attn.is_some() {
            2 * self.channels
        } else {
            self.channels
        }
    }

    /// Parameters of the correlation-guided branch (`P_Q`, `P_K`, `P_V`).
    pub fn projection_ids(&self) -> Vec<ParamId> {
        self.spatial.iter().chain(&self.channel).flat_map(Projections::ids).collect()
    }

    pub fn proj_dim(&self) -> usize {
        self.config.proj_dim_for(self.channels)
    }

    fn check_pair(&self, g: &Graph, f_i: Var, f_j: Var) -> Result<()> {
        let (si, sj) = (g.shape(f_i), g.shape(f_j));
        if si.len() != 4 || sj.len() != 4 || si[0] != sj[0] {
            return Err(Error::shape("xtam", format!("f_i {si:?} vs f_j {sj:?}")));
        }
        if si[1] != self.channels || sj[1] != self.channels {
            return Err(Error::shape("xtam", format!("expected {} channels, got {} and {}", self.channels, si[1], sj[1])));
        }
        Ok(())
    }

    /// Row-stochastic spatial correlation `[B, N_i, N_j]`: softmax over
    /// j-positions of `K^T Q / sqrt(d)`.
    pub fn correlation_matrix(&self, g: &mut Graph, store: &ParamStore, f_i: Var, f_j: Var) -> Result<Var> {
        self.check_pair(g, f_i, f_j)?;
        let proj = self.spatial.as_ref().ok_or_else(|| Error::Config("xTAM has no spatial stage".into()))?;
        let s = self.config.downscale;
        let d = self.proj_dim();
        let small_i = g.avg_pool(f_i, s)?;
        let small_j = g.avg_pool(f_j, s * s)?;
        let q = proj.query.forward(g, store, small_i)?;
        let k = proj.key.forward(g, store, small_j)?;
        let q = flatten_spatial(g, q)?;
        let k = flatten_spatial(g, k)?;
        let logits = g.bmm(q, k, true, false)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        g.softmax(logits, 2)
    }

    /// Correlation-guided features: each downscaled i-position takes the
    /// `corr`-weighted sum of value columns, then the grid is upsampled by `s`.
    pub fn xtask_features(&self, g: &mut Graph, store: &ParamStore, f_j: Var, corr: Var, out_hw: (usize, usize)) -> Result<Var> {
        let proj = self.spatial.as_ref().ok_or_else(|| Error::Config("xTAM has no spatial stage".into()))?;
        let s = self.config.downscale;
        let small_j = g.avg_pool(f_j, s * s)?;
        let v = proj.value.forward(g, store, small_j)?;
        let v = flatten_spatial(g, v)?;
        let (b, n_i, n_j) = match g.shape(corr) {
            &[b, n_i, n_j] => (b, n_i, n_j),
            other => return Err(Error::shape("xtask_features", format!("correlation {other:?} is not rank 3"))),
        };
        if g.shape(v)[2] != n_j || g.shape(v)[0] != b {
            return Err(Error::shape("xtask_features", format!("correlation {:?} vs values {:?}", g.shape(corr), g.shape(v))));
        }
        let (h, w) = out_hw;
        if h % s != 0 || w % s != 0 || (h / s) * (w / s) != n_i {
            return Err(Error::shape("xtask_features", format!("{n_i} query positions for a {h}x{w} output at scale {s}")));
        }
        let out = g.bmm(v, corr, false, true)?;
        let out = g.reshape(out, vec![b, self.channels, h / s, w / s])?;
        g.upsample(out, s)
    }

    /// Channel-attention counterpart of the correlation branch: a `c x c`
    /// softmax over source channels of pooled query/key descriptors.
    fn channel_features(&self, g: &mut Graph, store: &ParamStore, f_i: Var, f_j: Var) -> Result<Var> {
        let proj = self.channel.as_ref().ok_or_else(|| Error::Config("xTAM has no channel stage".into()))?;
        let s = self.config.downscale;
        let (b, c, h, w) = g.value(f_i).dims4()?;
        let small_i = g.avg_pool(f_i, s)?;
        let small_jj = g.avg_pool(f_j, s * s)?;
        let small_j = g.avg_pool(f_j, s)?;
        let q = proj.query.forward(g, store, small_i)?;
        let k = proj.key.forward(g, store, small_jj)?;
        let q = flatten_spatial(g, q)?;
        let k = flatten_spatial(g, k)?;
        let q = g.mean_last(q)?;
        let k = g.mean_last(k)?;
        let q = g.reshape(q, vec![b, c, 1])?;
        let k = g.reshape(k, vec![b, c, 1])?;
        let logits = g.bmm(q, k, false, true)?;
        let corr = g.softmax(logits, 2)?;
        let v = proj.value.forward(g, store, small_j)?;
        let v = flatten_spatial(g, v)?;
        let out = g.bmm(corr, v, false, false)?;
        let out = g.reshape(out, vec![b, c, h / s, w / s])?;
        g.upsample(out, s)
    }

    /// The correlation-guided message before gating, for any attention kind.
    pub fn cross_features(&self, g: &mut Graph, store: &ParamStore, f_i: Var, f_j: Var) -> Result<Var> {
        self.check_pair(g, f_i, f_j)?;
        let (_, _, h, w) = g.value(f_i).dims4()?;
        match self.config.attention {
            AttentionKind::Spatial => {
                let corr = self.correlation_matrix(g, store, f_i, f_j)?;
                self.xtask_features(g, store, f_j, corr, (h, w))
            }
            AttentionKind::Channel => self.channel_features(g, store, f_i, f_j),
            AttentionKind::Both => {
                let refined_j = self.channel_features(g, store, f_i, f_j)?;
                let corr = self.correlation_matrix(g, store, f_i, refined_j)?;
                self.xtask_features(g, store, refined_j, corr, (h, w))
            }
        }
    }

    pub fn self_attention(&self, g: &mut Graph, store: &ParamStore, f_j: Var) -> Result<Option<Var>> {
        self.self_attn.as_ref().map(|sa| sa.forward(g, store, f_j)).transpose()
    }

    /// `[diag(alpha) xtask, selfattn]`, or only the gated half without
    /// self-attention.
    pub fn directional_feature(&self, g: &mut Graph, store: &ParamStore, xtask: Var, selfattn: Option<Var>) -> Result<Var> {
        let c = g.shape(xtask).get(1).copied().unwrap_or(0);
        if c != self.channels || store.get(self.gate).numel() != c {
            return Err(Error::Config(format!(
                "gate of length {} applied to {c}-channel features",
                store.get(self.gate).numel()
            )));
        }
        let alpha = g.param(store, self.gate);
        let gated = g.mul_channel(xtask, alpha)?;
        match selfattn {
            Some(sa) => {
                if g.shape(sa) != g.shape(xtask) {
                    return Err(Error::shape("directional_feature", format!("{:?} vs {:?}", g.shape(xtask), g.shape(sa))));
                }
                g.concat(&[gated, sa], 1)
            }
            None => Ok(gated),
        }
    }

    /// Directional feature `f_{j -> i}`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f_i: Var, f_j: Var) -> Result<Var> {
        let xtask = self.cross_features(g, store, f_i, f_j)?;
        let sa = self.self_attention(g, store, f_j)?;
        self.directional_feature(g, store, xtask, sa)
    }
}

fn flatten_spatial(g: &mut Graph, x: Var) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4()?;
    g.reshape(x, vec![b, c, h * w])
}

/// Both directions of a task pair: returns `(f_{j -> i}, f_{i -> j})`.
pub fn xtam_bidirectional(
    g: &mut Graph,
    store: &ParamStore,
    f_i: Var,
    f_j: Var,
    j_to_i: &Xtam,
    i_to_j: &Xtam,
) -> Result<(Var, Var)> {
    let a = j_to_i.forward(g, store, f_i, f_j)?;
    let b = i_to_j.forward(g, store, f_j, f_i)?;
    Ok((a, b))
}

/// `F_{->i}`: 1x1 conv, batch normalisation, ReLU.
#[derive(Clone, Debug)]
pub struct Combiner {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl Combiner {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, c: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::pointwise(store, &format!("{name}.conv"), cin, c, ParamGroup::Decoder, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), c, ParamGroup::Decoder)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }

    /// Zeroes every weight and shift so that the output is identically zero.
    pub fn zero(&self, store: &mut ParamStore) {
        self.conv.zero(store);
        store.get_mut(self.bn.gamma).data_mut().fill(0.0);
        self.bn.zero_shift(store);
    }
}

fn check_same_dims(g: &Graph, features: &[Var], op: &'static str) -> Result<()> {
    if let Some(first) = features.first() {
        let s0 = g.shape(*first);
        for f in features {
            if g.shape(*f) != s0 {
                return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(*f), s0)));
            }
        }
    }
    Ok(())
}

/// Multi-task exchange block over `n` tasks sharing a channel count.
#[derive(Clone, Debug)]
pub struct Mteb {
    pub num_tasks: usize,
    pub channels: usize,
    pub fusion: FusionKind,
    /// `directions[i][j]` is the xTAM `j -> i`; the diagonal is `None`.
    pub directions: Vec<Vec<Option<Xtam>>>,
    pub combiners: Vec<Combiner>,
    /// Output projections for `FusionKind::Concat`.
    pub fuse: Vec<Option<Conv2d>>,
}

impl Mteb {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        task_names: &[&str],
        channels: usize,
        config: &XtamConfig,
        fusion: FusionKind,
        rng: &mut R,
    ) -> Result<Self> {
        let n = task_names.len();
        if n == 0 {
            return Err(Error::Config("mTEB needs at least one task".into()));
        }
        let mut directions = Vec::with_capacity(n);
        let mut combiners = Vec::new();
        let mut fuse = Vec::new();
        if n > 1 {
            for (i, ti) in task_names.iter().enumerate() {
                let mut row = Vec::with_capacity(n);
                for (j, tj) in task_names.iter().enumerate() {
                    row.push(if i == j {
                        None
                    } else {
                        Some(Xtam::new(store, &format!("{name}.{tj}_to_{ti}"), channels, config, rng)?)
                    });
                }
                let msg_channels = row.iter().flatten().map(Xtam::out_channels).sum();
                directions.push(row);
                combiners.push(Combiner::new(store, &format!("{name}.combine.{ti}"), msg_channels, channels, rng)?);
                fuse.push(match fusion {
                    FusionKind::Concat => Some(Conv2d::pointwise(
                        store,
                        &format!("{name}.fuse.{ti}"),
                        2 * channels,
                        channels,
                        ParamGroup::Decoder,
                        rng,
                    )?),
                    _ => None,
                });
            }
        }
        Ok(Self { num_tasks: n, channels, fusion, directions, combiners, fuse })
    }

    pub fn xtam(&self, target: usize, source: usize) -> Option<&Xtam> {
        self.directions.get(target)?.get(source)?.as_ref()
    }

    pub fn xtams(&self) -> impl Iterator<Item = &Xtam> {
        self.directions.iter().flatten().flatten()
    }

    /// Residual `F_{->i}` of the incoming messages for task `i`.
    pub fn residual(&self, g: &mut Graph, store: &ParamStore, features: &[Var], i: usize) -> Result<Var> {
        let mut msgs = Vec::with_capacity(self.num_tasks - 1);
        for (j, &f_j) in features.iter().enumerate() {
            if let Some(x) = self.xtam(i, j) {
                msgs.push(x.forward(g, store, features[i], f_j)?);
            }
        }
        let cat = if msgs.len() == 1 { msgs[0] } else { g.concat(&msgs, 1)? };
        self.combiners[i].forward(g, store, cat)
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, f: Var, r: Var, i: usize) -> Result<Var> {
        match self.fusion {
            FusionKind::Add => g.add(f, r),
            FusionKind::Prod => {
                let one_plus = g.add_scalar(r, 1.0);
                g.mul(f, one_plus)
            }
            FusionKind::Concat => {
                let cat = g.concat(&[f, r], 1)?;
                let conv = self.fuse[i].as_ref().ok_or_else(|| Error::Config("missing concat fusion projection".into()))?;
                conv.forward(g, store, cat)
            }
        }
    }

    /// Refines every task's features; shapes are preserved.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<Vec<Var>> {
        if features.len() != self.num_tasks {
            return Err(Error::shape("mteb", format!("{} feature maps for {} tasks", features.len(), self.num_tasks)));
        }
        check_same_dims(g, features, "mteb")?;
        if self.num_tasks == 1 {
            return Ok(features.to_vec());
        }
        let mut out = Vec::with_capacity(self.num_tasks);
        for i in 0..self.num_tasks {
            let r = self.residual(g, store, features, i)?;
            out.push(self.fuse(g, store, features[i], r, i)?);
        }
        Ok(out)
    }

    pub fn zero_combiners(&self, store: &mut ParamStore) {
        self.combiners.iter().for_each(|c| c.zero(store));
    }

    pub fn projection_ids(&self) -> Vec<ParamId> {
        self.xtams().flat_map(Xtam::projection_ids).collect()
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.xtams().map(|x| x.gate).collect()
    }
}

/// Self-attention distillation: `f_i + sum_{j != i} F_f(f_j) * sigmoid(F_m(f_j))`
/// with one message module per ordered pair.
#[derive(Clone, Debug)]
pub struct PadNetBlock {
    pub num_tasks: usize,
    /// `messages[i][j]` carries task `j` into task `i`.
    pub messages: Vec<Vec<Option<SelfAttention>>>,
}

impl PadNetBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, task_names: &[&str], channels: usize, rng: &mut R) -> Result<Self> {
        let n = task_names.len();
        let mut messages = Vec::with_capacity(n);
        for (i, ti) in task_names.iter().enumerate() {
            let mut row = Vec::with_capacity(n);
            for (j, tj) in task_names.iter().enumerate() {
                row.push(if i == j { None } else { Some(SelfAttention::new(store, &format!("{name}.{tj}_to_{ti}"), channels, rng)?) });
            }
            messages.push(row);
        }
        Ok(Self { num_tasks: n, messages })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &[Var]) -> Result<Vec<Var>> {
        if features.len() != self.num_tasks {
            return Err(Error::shape("padnet_distill", format!("{} feature maps for {} tasks", features.len(), self.num_tasks)));
        }
        check_same_dims(g, features, "padnet_distill")?;
        let mut out = Vec::with_capacity(self.num_tasks);
        for (i, row) in self.messages.iter().enumerate() {
            let mut acc = features[i];
            for (j, m) in row.iter().enumerate() {
                if let Some(m) = m {
                    let msg = m.forward(g, store, features[j])?;
                    acc = g.add(acc, msg)?;
                }
            }
            out.push(acc);
        }
        Ok(out)
    }

    pub fn zero_messages(&self, store: &mut ParamStore) {
        self.messages.iter().flatten().flatten().for_each(|m| m.feat.zero(store));
    }
}
