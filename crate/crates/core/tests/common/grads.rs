//! Finite-difference checks of every attention and loss op. Each entry
//! reduces the op output to a scalar through fixed random weights, so that
//! every output element contributes.

use densemtl_core::attention::{xtam_bidirectional, AttentionKind, FusionKind, Mteb, PadNetBlock, SelfAttention, Xtam, XtamConfig};
use densemtl_core::gradcheck::{check, GradCheckReport};
use densemtl_core::losses::{berhu, depth_loss, edge_loss, normal_loss, seg_loss, total_loss_var};
use densemtl_core::tensor::softmax;
use densemtl_core::uda::{adversarial_loss, discriminator_loss, normalize_depth, weighted_self_information, Discriminator, DiscriminatorSpec, UdaConfig};
use densemtl_core::{Graph, ParamGroup, ParamId, ParamKind, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn input(store: &mut ParamStore, name: &str, t: Tensor) -> ParamId {
    store.add(name, t, ParamGroup::Decoder, ParamKind::Trainable).unwrap()
}

/// `sum(x * w)` with `w` drawn from `seed`.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.shape(x).to_vec(), 1.0, &mut r);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn cfg(attention: AttentionKind, self_attention: bool) -> XtamConfig {
    XtamConfig { proj_dim: Some(4), downscale: 2, attention, self_attention }
}

fn nonzero_gates(store: &mut ParamStore, x: &Xtam, r: &mut ChaCha8Rng) {
    let n = store.get(x.gate).numel();
    *store.get_mut(x.gate) = Tensor::randn(vec![n], 1.0, r);
}

fn run<F>(store: &mut ParamStore, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    check(store, None, STEP, f).unwrap()
}

/// `(op name, report)` for every checked op.
pub fn suite() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(42);
    let (c, h, w) = (4, 8, 8);

    for kind in AttentionKind::ALL {
        let mut store = ParamStore::new();
        let fi = input(&mut store, "fi", Tensor::randn(vec![1, c, h, w], 1.0, &mut r));
        let fj = input(&mut store, "fj", Tensor::randn(vec![1, c, h, w], 1.0, &mut r));
        let x = Xtam::new(&mut store, "x", c, &cfg(kind, true), &mut r).unwrap();
        nonzero_gates(&mut store, &x, &mut r);
        if kind == AttentionKind::Spatial {
            let rep = run(&mut store, |g, s| {
                let (a, b) = (g.param(s, fi), g.param(s, fj));
                let corr = x.correlation_matrix(g, s, a, b)?;
                Ok(project(g, corr, 1))
            });
            out.push(("correlation_matrix".into(), rep));
        }
        let rep = run(&mut store, |g, s| {
            let (a, b) = (g.param(s, fi), g.param(s, fj));
            let xt = x.cross_features(g, s, a, b)?;
            Ok(project(g, xt, 2))
        });
        out.push((format!("xtask_features[{}]", kind.name()), rep));
        let rep = run(&mut store, |g, s| {
            let (a, b) = (g.param(s, fi), g.param(s, fj));
            let d = x.forward(g, s, a, b)?;
            Ok(project(g, d, 3))
        });
        out.push((format!("directional_feature[{}]", kind.name()), rep));
    }

    {
        let mut store = ParamStore::new();
        let f = input(&mut store, "f", Tensor::randn(vec![1, c, h, w], 1.0, &mut r));
        let sa = SelfAttention::new(&mut store, "sa", c, &mut r).unwrap();
        let rep = run(&mut store, |g, s| {
            let v = g.param(s, f);
            let y = sa.forward(g, s, v)?;
            Ok(project(g, y, 4))
        });
        out.push(("self_attention".into(), rep));
    }

    {
        let mut store = ParamStore::new();
        let fi = input(&mut store, "fi", Tensor::randn(vec![1, c, h, w], 1.0, &mut r));
        let fj = input(&mut store, "fj", Tensor::randn(vec![1, c, h, w], 1.0, &mut r));
        let a = Xtam::new(&mut store, "ji", c, &cfg(AttentionKind::Spatial, false), &mut r).unwrap();
        let b = Xtam::new(&mut store, "ij", c, &cfg(AttentionKind::Spatial, false), &mut r).unwrap();
        nonzero_gates(&mut store, &a, &mut r);
        nonzero_gates(&mut store, &b, &mut r);
        let rep = run(&mut store, |g, s| {
            let (x, y) = (g.param(s, fi), g.param(s, fj));
            let (p, q) = xtam_bidirectional(g, s, x, y, &a, &b)?;
            let (p, q) = (project(g, p, 5), project(g, q, 6));
            g.add(p, q)
        });
        out.push(("xtam_bidirectional[no_self]".into(), rep));
    }

    for fusion in FusionKind::ALL {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> =
            (0..3).map(|k| input(&mut store, &format!("f{k}"), Tensor::randn(vec![1, c, h, w], 1.0, &mut r))).collect();
        let m = Mteb::new(&mut store, "m", &["a", "b", "c"], c, &cfg(AttentionKind::Spatial, true), fusion, &mut r).unwrap();
        for id in m.gate_ids() {
            let n = store.get(id).numel();
            *store.get_mut(id) = Tensor::randn(vec![n], 1.0, &mut r);
        }
        let rep = run(&mut store, |g, s| {
            let feats: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let outs = m.forward(g, s, &feats)?;
            let mut acc = project(g, outs[0], 7);
            for (k, &o) in outs.iter().enumerate().skip(1) {
                let p = project(g, o, 7 + k as u64);
                acc = g.add(acc, p)?;
            }
            Ok(acc)
        });
        out.push((format!("mteb_refine[{}]", fusion.name()), rep));
    }

    {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> =
            (0..2).map(|k| input(&mut store, &format!("f{k}"), Tensor::randn(vec![1, c, h, w], 1.0, &mut r))).collect();
        let p = PadNetBlock::new(&mut store, "p", &["a", "b"], c, &mut r).unwrap();
        let rep = run(&mut store, |g, s| {
            let feats: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let outs = p.forward(g, s, &feats)?;
            let (a, b) = (project(g, outs[0], 11), project(g, outs[1], 12));
            g.add(a, b)
        });
        out.push(("padnet_distill".into(), rep));
    }

    // losses
    {
        let mut store = ParamStore::new();
        let logits = input(&mut store, "logits", Tensor::randn(vec![1, 4, 4, 4], 1.0, &mut r));
        let mut labels: Vec<u8> = (0..16).map(|_| r.random_range(0..4)).collect();
        labels[3] = 255;
        let rep = run(&mut store, |g, s| {
            let l = g.param(s, logits);
            Ok(seg_loss(g, l, &labels, 255)?.0)
        });
        out.push(("seg_loss".into(), rep));
    }
    {
        let mut store = ParamStore::new();
        // residuals on both sides of the branch point, none near it
        let vals: Vec<f64> = (0..32).map(|k| if k % 2 == 0 { 0.3 + 0.01 * k as f64 } else { -(2.0 + 0.05 * k as f64) }).collect();
        let res = input(&mut store, "r", Tensor::new(vec![1, 2, 4, 4], vals).unwrap());
        let rep = run(&mut store, |g, s| {
            let v = g.param(s, res);
            berhu(g, v, Some(1.0))
        });
        out.push(("berhu[fixed c]".into(), rep));
        let rep = run(&mut store, |g, s| {
            let v = g.param(s, res);
            berhu(g, v, None)
        });
        out.push(("berhu[c = 0.2 max|r|]".into(), rep));
    }
    {
        let mut store = ParamStore::new();
        let pred = input(&mut store, "d", Tensor::uniform(vec![1, 1, 4, 4], 2.0, 15.0, &mut r));
        let gt = Tensor::uniform(vec![1, 1, 4, 4], 2.0, 15.0, &mut r);
        let rep = run(&mut store, |g, s| {
            let v = g.param(s, pred);
            depth_loss(g, v, &gt, 20.0)
        });
        out.push(("depth_loss".into(), rep));
    }
    {
        let mut store = ParamStore::new();
        let pred = input(&mut store, "n", Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut r));
        let raw = Tensor::randn(vec![1, 3, 4, 4], 1.0, &mut r);
        let mut gt = raw.clone();
        for i in 0..16 {
            let n = (0..3).map(|ch| raw.data()[ch * 16 + i].powi(2)).sum::<f64>().sqrt();
            for ch in 0..3 {
                gt.data_mut()[ch * 16 + i] /= n;
            }
        }
        let rep = run(&mut store, |g, s| {
            let v = g.param(s, pred);
            let v = g.l2_normalize_channels(v)?;
            normal_loss(g, v, &gt)
        });
        out.push(("normal_loss".into(), rep));
    }
    {
        let mut store = ParamStore::new();
        let pred = input(&mut store, "e", Tensor::uniform(vec![1, 1, 4, 4], 0.05, 0.95, &mut r));
        let gt = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|k| (k % 5 == 0) as u8 as f64).collect()).unwrap();
        let rep = run(&mut store, |g, s| {
            let v = g.param(s, pred);
            edge_loss(g, v, &gt)
        });
        out.push(("edge_loss".into(), rep));
    }
    {
        let mut store = ParamStore::new();
        let ls: Vec<ParamId> = (0..6).map(|k| input(&mut store, &format!("l{k}"), Tensor::scalar(0.5 + k as f64))).collect();
        let rep = run(&mut store, |g, s| {
            let v: Vec<Var> = ls.iter().map(|&id| g.param(s, id)).collect();
            total_loss_var(g, &[v[0..2].to_vec(), v[2..4].to_vec()], &v[4..6], &[2.0, 0.5])
        });
        out.push(("total_loss".into(), rep));
    }

    // adaptation terms
    {
        let mut store = ParamStore::new();
        let logits = Tensor::randn(vec![1, 4, 4, 4], 1.0, &mut r);
        let probs = input(&mut store, "p", softmax(&logits, 1).unwrap());
        let rep = run(&mut store, |g, s| {
            let v = g.param(s, probs);
            let q = weighted_self_information(g, v);
            Ok(project(g, q, 13))
        });
        out.push(("weighted_self_information".into(), rep));
        let depth = input(&mut store, "depth", Tensor::uniform(vec![1, 1, 4, 4], 1.0, 19.0, &mut r));
        let ucfg = UdaConfig::default();
        let rep = check(&mut store, Some(&[depth]), STEP, |g, s| {
            let v = g.param(s, depth);
            let q = normalize_depth(g, v, &ucfg)?;
            Ok(project(g, q, 14))
        })
        .unwrap();
        out.push(("normalize_depth".into(), rep));
    }
    {
        let mut store = ParamStore::new();
        let spec = DiscriminatorSpec { stages: 2, width: 4, leaky_slope: 0.2 };
        let d = Discriminator::new(&mut store, "d", 2, &spec, &mut r).unwrap();
        let src = input(&mut store, "src", Tensor::uniform(vec![1, 2, 8, 8], 0.0, 0.4, &mut r));
        let trg = input(&mut store, "trg", Tensor::uniform(vec![1, 2, 8, 8], 0.0, 0.4, &mut r));
        let rep = run(&mut store, |g, s| {
            let (a, b) = (g.param(s, src), g.param(s, trg));
            let za = d.forward(g, s, a)?;
            let zb = d.forward(g, s, b)?;
            discriminator_loss(g, za, zb)
        });
        out.push(("discriminator_loss".into(), rep));
        let rep = run(&mut store, |g, s| {
            let b = g.param(s, trg);
            let z = d.forward(g, s, b)?;
            Ok(adversarial_loss(g, z))
        });
        out.push(("adversarial_loss".into(), rep));
    }
    out
}
