//! Explicit-loop reference implementations used as test oracles. Nothing
//! here calls into the library's kernels.
#![allow(dead_code)]

use densemtl_core::{ParamStore, Tensor};

/// `[B, C, H, W]` stored row-major.
pub struct Map {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self { b: s[0], c: s[1], h: s[2], w: s[3], v: t.data().to_vec() }
    }

    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w, v: vec![0.0; b * c * h * w] }
    }

    pub fn at(&self, n: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + ch) * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, ch: usize, y: usize, x: usize, val: f64) {
        let (c, h, w) = (self.c, self.h, self.w);
        self.v[((n * c + ch) * h + y) * w + x] = val;
    }
}

pub fn avg_pool(m: &Map, k: usize) -> Map {
    let mut out = Map::zeros(m.b, m.c, m.h / k, m.w / k);
    for n in 0..m.b {
        for c in 0..m.c {
            for y in 0..m.h / k {
                for x in 0..m.w / k {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += m.at(n, c, y * k + dy, x * k + dx);
                        }
                    }
                    out.set(n, c, y, x, s / (k * k) as f64);
                }
            }
        }
    }
    out
}

/// Zero-padded convolution with stride 1 and odd kernel.
pub fn conv_same(m: &Map, weight: &Tensor, bias: Option<&Tensor>) -> Map {
    let (co, ci, kh, _) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    assert_eq!(ci, m.c);
    let pad = (kh / 2) as isize;
    let wv = weight.data();
    let mut out = Map::zeros(m.b, co, m.h, m.w);
    for n in 0..m.b {
        for o in 0..co {
            for y in 0..m.h {
                for x in 0..m.w {
                    let mut s = bias.map_or(0.0, |b| b.data()[o]);
                    for i in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kh {
                                let yy = y as isize + ky as isize - pad;
                                let xx = x as isize + kx as isize - pad;
                                if yy < 0 || xx < 0 || yy >= m.h as isize || xx >= m.w as isize {
                                    continue;
                                }
                                s += wv[((o * ci + i) * kh + ky) * kh + kx] * m.at(n, i, yy as usize, xx as usize);
                            }
                        }
                    }
                    out.set(n, o, y, x, s);
                }
            }
        }
    }
    out
}

pub fn conv_named(m: &Map, store: &ParamStore, prefix: &str) -> Map {
    let w = store.get(store.id(&format!("{prefix}.weight")).expect("weight"));
    let b = store.id(&format!("{prefix}.bias")).map(|id| store.get(id));
    conv_same(m, w, b)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize(m: &Map, oh: usize, ow: usize) -> Map {
    let mut out = Map::zeros(m.b, m.c, oh, ow);
    let src = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    for n in 0..m.b {
        for c in 0..m.c {
            for y in 0..oh {
                let (y0, y1, fy) = src(y, oh, m.h);
                for x in 0..ow {
                    let (x0, x1, fx) = src(x, ow, m.w);
                    let top = m.at(n, c, y0, x0) * (1.0 - fx) + m.at(n, c, y0, x1) * fx;
                    let bot = m.at(n, c, y1, x0) * (1.0 - fx) + m.at(n, c, y1, x1) * fx;
                    out.set(n, c, y, x, top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Spatial correlation `[b][i][j]` by explicit loops.
pub fn correlation(f_i: &Map, f_j: &Map, store: &ParamStore, prefix: &str, s: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    let q = conv_named(&avg_pool(f_i, s), store, &format!("{prefix}.spatial.query"));
    let k = conv_named(&avg_pool(f_j, s * s), store, &format!("{prefix}.spatial.key"));
    let (ni, nj) = (q.h * q.w, k.h * k.w);
    let mut out = vec![vec![vec![0.0; nj]; ni]; f_i.b];
    for n in 0..f_i.b {
        for pi in 0..ni {
            let mut logits = vec![0.0; nj];
            for (pj, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for ch in 0..d {
                    dot += q.at(n, ch, pi / q.w, pi % q.w) * k.at(n, ch, pj / k.w, pj % k.w);
                }
                *l = dot / (d as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for pj in 0..nj {
                out[n][pi][pj] = (logits[pj] - m).exp() / z;
            }
        }
    }
    out
}

/// Correlation-guided features by explicit loops, upsampled to `f_i`'s grid.
pub fn xtask(f_i: &Map, f_j: &Map, store: &ParamStore, prefix: &str, s: usize, d: usize) -> Map {
    let corr = correlation(f_i, f_j, store, prefix, s, d);
    let v = conv_named(&avg_pool(f_j, s * s), store, &format!("{prefix}.spatial.value"));
    let (hs, ws) = (f_i.h / s, f_i.w / s);
    let mut small = Map::zeros(f_i.b, v.c, hs, ws);
    for n in 0..f_i.b {
        for c in 0..v.c {
            for pi in 0..hs * ws {
                let mut acc = 0.0;
                for pj in 0..v.h * v.w {
                    acc += corr[n][pi][pj] * v.at(n, c, pj / v.w, pj % v.w);
                }
                small.set(n, c, pi / ws, pi % ws, acc);
            }
        }
    }
    resize(&small, f_i.h, f_i.w)
}

pub fn self_attention(f: &Map, store: &ParamStore, prefix: &str) -> Map {
    let feat = conv_named(f, store, &format!("{prefix}.feat"));
    let mask = conv_named(f, store, &format!("{prefix}.mask"));
    let mut out = Map::zeros(feat.b, feat.c, feat.h, feat.w);
    for (o, (a, m)) in out.v.iter_mut().zip(feat.v.iter().zip(&mask.v)) {
        *o = a * sigmoid(*m);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
pub mod grads;
