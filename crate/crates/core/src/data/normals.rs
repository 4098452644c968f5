use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Intrinsics;

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Surface normals of a depth map, `[3, H, W]`.
///
/// Each pixel is unprojected; the vectors to its right, down, left and up
/// neighbours give four cross products `(r,d), (d,l), (l,u), (u,r)` whose
/// mean is normalised and flipped to face the camera (`n_z < 0`). A missing
/// neighbour is replaced by the mirrored one-sided difference.
pub fn normals_from_depth(depth: &[f64], height: usize, width: usize, k: &Intrinsics) -> Result<Tensor> {
    if depth.len() != height * width {
        return Err(Error::shape("normals_from_depth", format!("{} depths for {height}x{width}", depth.len())));
    }
    if height < 2 || width < 2 {
        return Err(Error::shape("normals_from_depth", format!("{height}x{width} has no neighbours")));
    }
    if let Some(d) = depth.iter().find(|&&d| !(d > 0.0) || !d.is_finite()) {
        return Err(Error::value("normals_from_depth", format!("depth {d} is not positive")));
    }
    let p = height * width;
    let point = |x: usize, y: usize| k.unproject(x as f64, y as f64, depth[y * width + x]);
    let mut out = vec![0.0; 3 * p];
    for y in 0..height {
        for x in 0..width {
            let c = point(x, y);
            let right = (x + 1 < width).then(|| sub(point(x + 1, y), c));
            let left = (x > 0).then(|| sub(point(x - 1, y), c));
            let down = (y + 1 < height).then(|| sub(point(x, y + 1), c));
            let up = (y > 0).then(|| sub(point(x, y - 1), c));
            let neg = |v: [f64; 3]| [-v[0], -v[1], -v[2]];
            let r = right.unwrap_or_else(|| neg(left.expect("width >= 2")));
            let l = left.unwrap_or_else(|| neg(r));
            let d = down.unwrap_or_else(|| neg(up.expect("height >= 2")));
            let u = up.unwrap_or_else(|| neg(d));
            let mut n = [0.0; 3];
            for (a, b) in [(r, d), (d, l), (l, u), (u, r)] {
                let cr = cross(a, b);
                for i in 0..3 {
                    n[i] += cr[i] / 4.0;
                }
            }
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let n = if norm > 0.0 {
                let s = if n[2] > 0.0 { -1.0 / norm } else { 1.0 / norm };
                [n[0] * s, n[1] * s, n[2] * s]
            } else {
                [0.0, 0.0, -1.0]
            };
            for i in 0..3 {
                out[i * p + y * width + x] = n[i];
            }
        }
    }
    Tensor::new(vec![3, height, width], out)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, &mut upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

/// Rescales a predicted depth map so that its median matches the ground
/// truth's: `pred * median(gt) / median(pred)`.
pub fn median_scale(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape("median_scale", format!("{} vs {}", pred.len(), gt.len())));
    }
    if pred.iter().chain(gt).any(|&v| !(v > 0.0)) {
        return Err(Error::value("median_scale", "depth must be strictly positive"));
    }
    let s = median(gt) / median(pred);
    Ok(pred.iter().map(|v| v * s).collect())
}
