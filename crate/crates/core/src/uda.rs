//! Output-level adversarial domain adaptation: alignment maps, patch
//! discriminators and the combined objective.
//!
//! Discriminators return logits; the binary cross-entropies below are
//! written as `softplus(-z)` (label 1) and `softplus(z)` (label 0), which is
//! the stable form of `-ln sigmoid(z)` and `-ln(1 - sigmoid(z))`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Optimizer, OptimizerKind};
use crate::params::{ParamGroup, ParamKind, ParamStore};
use crate::tensor::{ConvGeom, Tensor};

/// Clamp inside the logarithm of the self-information map.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    /// Stride-2 stages before the 3x3 output convolution.
    pub stages: usize,
    pub width: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self { stages: 4, width: 64, leaky_slope: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdaConfig {
    pub lambda_adv: f64,
    /// Source-domain depth range used to normalise depth maps.
    pub depth_min: f64,
    pub depth_max: f64,
    #[serde(default)]
    pub discriminator: DiscriminatorSpec,
    /// Discriminator learning rate.
    #[serde(default = "default_disc_lr")]
    pub disc_lr: f64,
}

fn default_disc_lr() -> f64 {
    1e-4
}

impl Default for UdaConfig {
    fn default() -> Self {
        Self { lambda_adv: 5e-3, depth_min: 0.0, depth_max: 20.0, discriminator: DiscriminatorSpec::default(), disc_lr: default_disc_lr() }
    }
}

impl UdaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0) {
            return Err(Error::Config(format!("lambda_adv = {} must be >= 0", self.lambda_adv)));
        }
        if !(self.depth_min < self.depth_max) {
            return Err(Error::Config(format!("depth range [{}, {}] is empty", self.depth_min, self.depth_max)));
        }
        if self.discriminator.width == 0 {
            return Err(Error::Config("discriminator width must be positive".into()));
        }
        Ok(())
    }
}

/// `-P * ln P` per element, with `0 * ln 0 = 0`. Entries lie in `[0, 1/e]`.
pub fn weighted_self_information(g: &mut Graph, probs: Var) -> Var {
    let log = g.log_clamped(probs, LOG_EPS);
    let plogp = g.mul(probs, log).expect("same shape");
    g.scale(plogp, -1.0)
}

/// `(d - min) / (max - min)` clamped to `[0, 1]`.
pub fn normalize_depth(g: &mut Graph, depth: Var, cfg: &UdaConfig) -> Result<Var> {
    cfg.validate()?;
    let shifted = g.add_scalar(depth, -cfg.depth_min);
    let scaled = g.scale(shifted, 1.0 / (cfg.depth_max - cfg.depth_min));
    Ok(g.clamp(scaled, 0.0, 1.0))
}

/// Fully convolutional discriminator: `stages` stride-2 4x4 convolutions
/// with leaky ReLU, then a 3x3 convolution to one logit per patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub out: Conv2d,
    pub slope: f64,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, spec: &DiscriminatorSpec, rng: &mut R) -> Result<Self> {
        let group = ParamGroup::Discriminator;
        let mut convs = Vec::with_capacity(spec.stages);
        let mut c = in_channels;
        for k in 0..spec.stages {
            let geom = ConvGeom::new(4, 2, 1, 1);
            convs.push(Conv2d::new(store, &format!("{name}.conv{k}"), c, spec.width, geom, true, group, rng)?);
            c = spec.width;
        }
        let out = Conv2d::new(store, &format!("{name}.out"), c, 1, ConvGeom::same(3, 1), true, group, rng)?;
        Ok(Self { convs, out, slope: spec.leaky_slope })
    }

    /// Patch logits `[B, 1, H / 2^stages, W / 2^stages]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, q: Var) -> Result<Var> {
        let mut x = q;
        for c in &self.convs {
            let y = c.forward(g, store, x)?;
            x = g.leaky_relu(y, self.slope);
        }
        self.out.forward(g, store, x)
    }
}

/// Mean of `-ln sigmoid(z)` (label 1).
fn bce_ones(g: &mut Graph, logits: Var) -> Var {
    let neg = g.scale(logits, -1.0);
    let sp = g.softplus(neg);
    g.mean(sp)
}

/// Mean of `-ln(1 - sigmoid(z))` (label 0).
fn bce_zeros(g: &mut Graph, logits: Var) -> Var {
    let sp = g.softplus(logits);
    g.mean(sp)
}

/// Discriminator objective: source patches labelled 1, target patches 0.
/// The two per-domain means are averaged.
pub fn discriminator_loss(g: &mut Graph, src_logits: Var, trg_logits: Var) -> Result<Var> {
    let a = bce_ones(g, src_logits);
    let b = bce_zeros(g, trg_logits);
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Generator objective: target patches labelled 1.
pub fn adversarial_loss(g: &mut Graph, trg_logits: Var) -> Var {
    bce_ones(g, trg_logits)
}

/// `(1/|S|) sum_s sum_t (w_t L_t^s + lambda L_adv_t^s) + sum_t (w_t L_t + lambda L_adv_t)`.
/// Rows of `task_inter` / `adv_inter` are scales, columns tasks.
pub fn mtl_uda_total(
    task_inter: &[Vec<f64>],
    task_final: &[f64],
    adv_inter: &[Vec<f64>],
    adv_final: &[f64],
    weights: &[f64],
    lambda_adv: f64,
) -> Result<f64> {
    let n = weights.len();
    let rows_ok = |rows: &[Vec<f64>]| rows.iter().all(|r| r.len() == n);
    if task_final.len() != n || adv_final.len() != n || !rows_ok(task_inter) || !rows_ok(adv_inter) || task_inter.len() != adv_inter.len() {
        return Err(Error::shape("mtl_uda_total", "loss tables do not match the task weights"));
    }
    let term = |l: &[f64], a: &[f64]| (0..n).map(|t| weights[t] * l[t] + lambda_adv * a[t]).sum::<f64>();
    let inter = if task_inter.is_empty() {
        0.0
    } else {
        task_inter.iter().zip(adv_inter).map(|(l, a)| term(l, a)).sum::<f64>() / task_inter.len() as f64
    };
    Ok(inter + term(task_final, adv_final))
}

/// Loss history of [`two_player_smoke`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoPlayerTrace {
    /// Discriminator loss after every discriminator-only step.
    pub warmup: Vec<f64>,
    /// Discriminator loss after every adversarial round.
    pub adversarial: Vec<f64>,
}

impl TwoPlayerTrace {
    /// First warm-up step at which the loss is below `threshold`.
    pub fn warmup_below(&self, threshold: f64) -> Option<usize> {
        self.warmup.iter().position(|&l| l < threshold)
    }

    /// First adversarial round at which the loss is above `threshold`.
    pub fn adversarial_above(&self, threshold: f64) -> Option<usize> {
        self.adversarial.iter().position(|&l| l > threshold)
    }
}

/// Toy two-player game on separable one-channel maps. Source maps are
/// drawn around 0.8; target maps are `sigmoid(theta)` with learnable
/// `theta`, starting around 0.2. A discriminator is first trained alone
/// for `warmup` steps, then the target maps and the discriminator are
/// updated alternately for `rounds` steps.
pub fn two_player_smoke(seed: u64, warmup: usize, rounds: usize) -> Result<TwoPlayerTrace> {
    const B: usize = 4;
    const SIZE: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = DiscriminatorSpec { stages: 2, width: 16, leaky_slope: 0.2 };
    // one store; the two optimisers are told apart by parameter group
    let mut store = ParamStore::new();
    let disc = Discriminator::new(&mut store, "disc", 1, &spec, &mut rng)?;
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let theta0 = Tensor::new(vec![B, 1, SIZE, SIZE], (0..B * SIZE * SIZE).map(|_| logit(rng.random_range(0.1..0.3))).collect())?;
    let theta = store.add("target.theta", theta0, ParamGroup::Decoder, ParamKind::Trainable)?;
    let adam = OptimizerKind::Adam { beta1: 0.5, beta2: 0.999, eps: 1e-8 };
    let mut d_opt = Optimizer::new(adam, &[(ParamGroup::Discriminator, 2e-3)]);
    let mut g_opt = Optimizer::new(adam, &[(ParamGroup::Decoder, 5e-2)]);

    let source = |rng: &mut ChaCha8Rng| Tensor::uniform(vec![B, 1, SIZE, SIZE], 0.7, 0.9, rng);
    let d_step = |store: &mut ParamStore, d_opt: &mut Optimizer, src: Tensor| -> Result<f64> {
        let mut g = Graph::new(true);
        let s = g.constant(src);
        let t = g.constant(store.get(theta).clone());
        let t = g.sigmoid(t);
        let zs = disc.forward(&mut g, store, s)?;
        let zt = disc.forward(&mut g, store, t)?;
        let loss = discriminator_loss(&mut g, zs, zt)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?.into_param_grads();
        d_opt.step(store, &grads, 1.0)?;
        Ok(value)
    };

    let mut trace = TwoPlayerTrace { warmup: Vec::with_capacity(warmup), adversarial: Vec::with_capacity(rounds) };
    for _ in 0..warmup {
        let src = source(&mut rng);
        trace.warmup.push(d_step(&mut store, &mut d_opt, src)?);
    }
    for _ in 0..rounds {
        let mut g = Graph::new(true);
        let t = g.param(&store, theta);
        let q = g.sigmoid(t);
        let z = disc.forward(&mut g, &store, q)?;
        let adv = adversarial_loss(&mut g, z);
        let grads = g.backward(adv)?.into_param_grads();
        g_opt.step(&mut store, &grads, 1.0)?;
        let src = source(&mut rng);
        trace.adversarial.push(d_step(&mut store, &mut d_opt, src)?);
    }
    Ok(trace)
}
