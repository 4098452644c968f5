//! Dense row-major `f64` tensors and the raw numeric kernels used by the
//! autograd tape: convolution via im2col + GEMM, pooling, bilinear resizing
//! and softmax.
//!
//! Feature maps are always laid out as `[batch, channels, height, width]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    /// Samples i.i.d. entries uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape("dims4", format!("expected a 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies sample `index` out of a batched tensor, keeping a leading
    /// batch dimension of one.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::shape("batch_item", "scalar tensor"))?;
        if index >= n {
            return Err(Error::shape("batch_item", format!("index {index} out of {n}")));
        }
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self { shape, data: self.data[index * stride..(index + 1) * stride].to_vec() })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape.insert(0, parts.len());
        Ok(Self { shape, data })
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where the
/// transposes are expressed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides above address exactly those row-major (or transposed) blocks.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        Self { kernel, stride, padding, dilation }
    }

    /// Stride-1 convolution that preserves the spatial size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { kernel, stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        if h + 2 * self.padding < span || w + 2 * self.padding < span || self.stride == 0 {
            return Err(Error::shape("conv2d", format!("input {h}x{w} too small for {self:?}")));
        }
        Ok(((h + 2 * self.padding - span) / self.stride + 1, (w + 2 * self.padding - span) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, geom: ConvGeom, oh: usize, ow: usize, col: &mut [f64]) {
    let k = geom.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki * geom.dilation) as isize - geom.padding as isize;
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = (kj * geom.dilation) as isize - geom.padding as isize;
                    if geom.stride == 1 {
                        // valid columns form one contiguous run
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                        out[..lo].fill(0.0);
                        out[hi..].fill(0.0);
                        if hi > lo {
                            let start = (lo as isize + shift) as usize;
                            out[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * geom.stride) as isize + shift;
                        *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, geom: ConvGeom, oh: usize, ow: usize, x: &mut [f64]) {
    let k = geom.kernel;
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki * geom.dilation) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    let shift = (kj * geom.dilation) as isize - geom.padding as isize;
                    if geom.stride == 1 {
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(lo as isize, ow as isize) as usize;
                        if hi > lo {
                            let start = (lo as isize + shift) as usize;
                            for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * geom.stride) as isize + shift;
                        if ix >= 0 && (ix as usize) < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_check(x: &Tensor, weight: &Tensor, geom: ConvGeom) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c || kh != geom.kernel || kw != geom.kernel {
        return Err(Error::shape(
            "conv2d",
            format!("input {:?} incompatible with weight {:?} ({geom:?})", x.shape(), weight.shape()),
        ));
    }
    let (oh, ow) = geom.output_size(h, w)?;
    Ok((n, c, h, w, co, oh, ow))
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: ConvGeom) -> Result<Tensor> {
    let (n, c, h, w, co, oh, ow) = conv_check(x, weight, geom)?;
    if let Some(b) = bias {
        if b.numel() != co {
            return Err(Error::shape("conv2d", format!("bias has {} entries for {co} outputs", b.numel())));
        }
    }
    let kdim = c * geom.kernel * geom.kernel;
    let p = oh * ow;
    let mut out = vec![0.0; n * co * p];
    let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kdim * p] };
    for b in 0..n {
        let xb = &x.data[b * c * h * w..(b + 1) * c * h * w];
        let ob = &mut out[b * co * p..(b + 1) * co * p];
        if let Some(bias) = bias {
            for (o, &bv) in ob.chunks_mut(p).zip(bias.data()) {
                o.fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if geom.is_pointwise() {
            gemm(co, kdim, p, &weight.data, false, xb, false, ob, beta);
        } else {
            im2col(xb, c, h, w, geom, oh, ow, &mut col);
            gemm(co, kdim, p, &weight.data, false, &col, false, ob, beta);
        }
    }
    Tensor::new(vec![n, co, oh, ow], out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n, c, h, w, co, oh, ow) = conv_check(x, weight, geom)?;
    let kdim = c * geom.kernel * geom.kernel;
    let p = oh * ow;
    let mut gw = vec![0.0; co * kdim];
    let mut gb = vec![0.0; co];
    let mut gx = if need_input { vec![0.0; x.numel()] } else { Vec::new() };
    let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kdim * p] };
    let mut gcol = if need_input && !geom.is_pointwise() { vec![0.0; kdim * p] } else { Vec::new() };
    for b in 0..n {
        let xb = &x.data[b * c * h * w..(b + 1) * c * h * w];
        let gob = &grad_out.data[b * co * p..(b + 1) * co * p];
        for (g, row) in gb.iter_mut().zip(gob.chunks(p)) {
            *g += row.iter().sum::<f64>();
        }
        let cols: &[f64] = if geom.is_pointwise() {
            xb
        } else {
            im2col(xb, c, h, w, geom, oh, ow, &mut col);
            &col
        };
        gemm(co, p, kdim, gob, false, cols, true, &mut gw, 1.0);
        if need_input {
            let gxb = &mut gx[b * c * h * w..(b + 1) * c * h * w];
            if geom.is_pointwise() {
                gemm(kdim, co, p, &weight.data, true, gob, false, gxb, 1.0);
            } else {
                gemm(kdim, co, p, &weight.data, true, gob, false, &mut gcol, 0.0);
                col2im(&gcol, c, h, w, geom, oh, ow, gxb);
            }
        }
    }
    let gx = if need_input { Some(Tensor::new(x.shape.clone(), gx)?) } else { None };
    Ok((gx, Tensor::new(weight.shape.clone(), gw)?, Tensor::new(vec![co], gb)?))
}

/// Non-overlapping `k x k` average pooling. Sizes must divide exactly.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Indivisible { op: "avg_pool", height: h, width: w, factor: k });
    }
    let (oh, ow) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, o) in x.data.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let orow = &mut o[(y / k) * ow..(y / k + 1) * ow];
            for (xx, v) in row.iter().enumerate() {
                orow[xx / k] += v * norm;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn avg_pool_backward(grad_out: &Tensor, k: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    let norm = 1.0 / (k * k) as f64;
    let mut gx = vec![0.0; n * c * h * w];
    for (plane, g) in gx.chunks_mut(h * w).zip(grad_out.data.chunks(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = g[(y / k) * ow + x / k] * norm;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gx)
}

/// Source taps of half-pixel-centred linear interpolation along one axis:
/// `(lo, hi, frac)` for every output coordinate.
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("resize_bilinear", "zero output size"));
    }
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, o) in x.data.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                o[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn resize_bilinear_backward(grad_out: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    let ty = linear_taps(h, oh);
    let tx = linear_taps(w, ow);
    let mut gx = vec![0.0; n * c * h * w];
    for (plane, g) in gx.chunks_mut(h * w).zip(grad_out.data.chunks(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], gx)
}

/// Splits a shape around `axis` into `(outer, dim, inner)` extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", x.shape)));
    }
    let (outer, dim, inner) = axis_extents(&x.shape, axis);
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut max = f64::NEG_INFINITY;
            for d in 0..dim {
                max = max.max(out[base + d * inner]);
            }
            let mut total = 0.0;
            for d in 0..dim {
                let e = (out[base + d * inner] - max).exp();
                out[base + d * inner] = e;
                total += e;
            }
            for d in 0..dim {
                out[base + d * inner] /= total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}
